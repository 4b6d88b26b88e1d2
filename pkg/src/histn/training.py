"""Optimization loop and the two experimental protocols.

Subject-dependent: each trial's stimulus window is cut into ``n_folds``
equal time trunks; fold k tests on trunk k, validates on the previous
trunk (wrapping), and trains on the rest, so no test sample's time
range is ever seen in training.

Leave-one-subject-out: stage 1 trains the whole network on all other
subjects with consensus relabels; stage 2 freezes the time head and
fine-tunes on the target subject's first 10 seconds per trial; testing
draws from the remaining time.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import TrialRecord, balanced_batch, baseline_normalize, consensus_relabel, segments_to_batch
from .errors import (
    ContractError,
    NumericError,
    ParameterError,
    ProtocolError,
    ValidationError,
)
from .metrics import EvalReport
from .model import HistnModel, ModelConfig, build_model, config_to_dict
from .tensor import Tensor, backward

PROTOCOLS = ("subject_dependent_cv", "loocv_two_stage")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers for one set of named parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], lr: float) -> "AdamState":
        if lr <= 0:
            raise ParameterError(f"learning rate must be > 0, got {lr}")
        state = cls(lr=lr)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update over exactly the buffered parameters."""
    if set(params.keys()) != set(state.m.keys()):
        raise ContractError("parameter names do not match the optimizer state")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    for name, p in params.items():
        grad = p.grad
        if grad is None:
            grad = np.zeros_like(p.data)
        elif np.isnan(grad).any():
            raise NumericError(f"gradient of {name} contains NaN")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunRecord:
    """Loss curves and the best-checkpoint bookkeeping of one training run.

    ``wall_seconds`` is informational only and excluded from the
    serialized form, which is fully determined by the seed.
    """

    epochs: int
    steps_per_epoch: int
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "steps_per_epoch": self.steps_per_epoch,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }


Sampler = Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def _val_loss(model: HistnModel, val_data: tuple[np.ndarray, np.ndarray]) -> float:
    xv, yv = val_data
    outputs = model.forward(xv, training=False)
    return model.loss(outputs, yv).item()


def train(
    model: HistnModel,
    sample_batch: Sampler,
    val_data: tuple[np.ndarray, np.ndarray] | None,
    *,
    epochs: int,
    steps_per_epoch: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> RunRecord:
    """Train in place; with ``val_data`` the best-validation epoch's
    parameters are restored at the end, otherwise the final parameters
    stand. Raises on non-finite losses or gradients, naming the epoch.
    """
    if epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {epochs}")
    if epochs > 0 and steps_per_epoch < 1:
        raise ParameterError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    record = RunRecord(epochs=epochs, steps_per_epoch=steps_per_epoch)
    started = time.monotonic()
    if epochs == 0:
        record.wall_seconds = time.monotonic() - started
        return record
    trainable = model.parameters(trainable_only=True)
    if not trainable:
        raise ContractError("no trainable parameters")
    state = AdamState.for_params(trainable, lr)
    best_arrays: dict[str, np.ndarray] | None = None
    for epoch in range(epochs):
        epoch_losses = []
        for step in range(steps_per_epoch):
            x, y = sample_batch(batch_size, rng)
            try:
                outputs = model.forward(x, training=True, rng=rng)
                loss = model.loss(outputs, y)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError("loss is non-finite")
                model.zero_grad()
                backward(loss)
                adam_step(trainable, state)
            except NumericError as err:
                raise NumericError(f"epoch {epoch} step {step}: {err}") from err
            epoch_losses.append(value)
        record.train_losses.append(sum(epoch_losses) / len(epoch_losses))
        if val_data is not None:
            try:
                vloss = _val_loss(model, val_data)
            except NumericError as err:
                raise NumericError(f"epoch {epoch} validation: {err}") from err
            record.val_losses.append(vloss)
            if record.best_val_loss is None or vloss < record.best_val_loss:
                record.best_val_loss = vloss
                record.best_epoch = epoch
                best_arrays = model.state_arrays()
    if best_arrays is not None:
        model.load_arrays(best_arrays)
    record.wall_seconds = time.monotonic() - started
    return record


def fine_tune(
    model: HistnModel,
    freeze_groups: Sequence[str],
    sample_batch: Sampler,
    val_data: tuple[np.ndarray, np.ndarray] | None,
    *,
    epochs: int,
    steps_per_epoch: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> RunRecord:
    """Freeze the named groups, then train the rest."""
    model.freeze(freeze_groups)
    return train(
        model,
        sample_batch,
        val_data,
        epochs=epochs,
        steps_per_epoch=steps_per_epoch,
        batch_size=batch_size,
        lr=lr,
        rng=rng,
    )


# ---------------------------------------------------------------------------
# protocol configuration


@dataclass
class ProtocolConfig:
    protocol: str = "subject_dependent_cv"
    dimension: str = "valence"
    window_seconds: float = 1.0
    protocol_seconds: float = 60.0
    seed: int = 0
    test_draws: int = 1000
    val_draws: int = 250
    steps_per_epoch: int | None = None
    # subject-dependent stage
    batch_size: int = 256
    lr: float = 0.001
    epochs: int = 50
    n_folds: int = 10
    folds: list[int] | None = None
    # leave-one-subject-out stages
    stage1_batch_size: int = 120
    stage1_lr: float = 0.01
    stage1_epochs: int = 100
    stage2_batch_size: int = 100
    stage2_lr: float = 0.001
    stage2_epochs: int = 400
    stage2_seconds: float = 10.0
    subjects: list[str] | None = None

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.dimension not in ("valence", "arousal"):
            raise ValidationError(f"unknown label dimension {self.dimension!r}")
        if self.window_seconds <= 0 or self.protocol_seconds <= 0:
            raise ValidationError("window_seconds and protocol_seconds must be > 0")
        for name in ("test_draws", "val_draws", "batch_size", "epochs", "n_folds",
                     "stage1_batch_size", "stage1_epochs", "stage2_batch_size", "stage2_epochs"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValidationError("steps_per_epoch must be >= 1 when given")
        for name in ("lr", "stage1_lr", "stage2_lr"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")
        if self.n_folds < 3:
            raise ValidationError(f"n_folds must be >= 3 so a training trunk remains, got {self.n_folds}")
        if self.stage2_seconds <= 0 or self.stage2_seconds >= self.protocol_seconds:
            raise ValidationError("stage2_seconds must lie inside the protocol window")

    @classmethod
    def from_dict(cls, data: Mapping) -> "ProtocolConfig":
        fields_ = set(cls.__dataclass_fields__)
        unknown = set(data.keys()) - fields_
        if unknown:
            raise ValidationError(f"unknown protocol config keys {sorted(unknown)}")
        cfg = cls(**dict(data))
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class ProtocolResult:
    protocol: str
    units: list[dict]
    aggregate: dict
    seed: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "units": self.units,
            "aggregate": self.aggregate,
            "seed": self.seed,
            "config": self.config,
        }


_AGGREGATE_METRICS = ("f1_macro", "top2_accuracy", "tri_p", "seq2hr")


def _aggregate(reports: Sequence[EvalReport]) -> dict:
    out = {}
    for metric in _AGGREGATE_METRICS:
        values = np.asarray([getattr(r, metric) for r in reports], dtype=np.float64)
        std = float(values.std(ddof=1)) if values.size > 1 else 0.0
        out[metric] = {"mean": float(values.mean()), "std": std}
    return out


def _labels_present(trials: Sequence[TrialRecord], dimension: str) -> list[int]:
    return sorted({t.labels[dimension] for t in trials if dimension in t.labels})


def _balanced_size(requested: int, num_labels: int) -> int:
    size = (requested // num_labels) * num_labels
    if size < num_labels:
        size = num_labels
    return size


def _make_sampler(trials, window_seconds, dimension, ranges) -> Sampler:
    def sample(batch_size: int, rng: np.random.Generator):
        segments = balanced_batch(trials, batch_size, window_seconds, rng, dimension, ranges)
        return segments_to_batch(segments)

    return sample


def _steps_from_data(total_seconds: float, rate: int, batch_size: int) -> int:
    return max(1, math.ceil(total_seconds * rate / batch_size))


def _evaluate(model: HistnModel, trials, cfg: ProtocolConfig, ranges, rng) -> EvalReport:
    labels = _labels_present(trials, cfg.dimension)
    draws = _balanced_size(cfg.test_draws, len(labels))
    segments = balanced_batch(trials, draws, cfg.window_seconds, rng, cfg.dimension, ranges)
    x, y = segments_to_batch(segments)
    rankings = model.predict_ranking(model.forward(x, training=False))
    return EvalReport.from_rankings(rankings, y, model.config.num_classes)


# ---------------------------------------------------------------------------
# subject-dependent cross-validation


def fold_plan(n_folds: int) -> list[tuple[int, int, list[int]]]:
    """Per fold: (test trunk, validation trunk, training trunks).

    Validation is the trunk before the test trunk, wrapping at 0.
    """
    if n_folds < 3:
        raise ValidationError(f"n_folds must be >= 3, got {n_folds}")
    plan = []
    for k in range(n_folds):
        val = (k - 1) % n_folds
        train_ks = [i for i in range(n_folds) if i not in (k, val)]
        plan.append((k, val, train_ks))
    return plan


def _trim_offset(trial: TrialRecord, protocol_samples: int) -> int:
    total = trial.signal.shape[1]
    if total < protocol_samples:
        raise ProtocolError(
            f"subject {trial.subject_id} trial {trial.trial_id} has {total} samples, "
            f"needs {protocol_samples}"
        )
    return total - protocol_samples


def _trunk_ranges(trials, cfg: ProtocolConfig, trunk_ids: Sequence[int], trunk_samples: int) -> list[tuple[int, int]]:
    # All trials are trimmed to the same protocol window, so ranges are
    # computed on the common trailing window of each signal.
    protocol_samples = trunk_samples * cfg.n_folds
    offsets = {_trim_offset(t, protocol_samples) for t in trials}
    if len(offsets) != 1:
        # Mixed-length trials: ranges must be per-trial; keep it simple
        # and require equal lengths for trunk-based folding.
        raise ProtocolError("all trials must have equal length for trunk folding")
    base = offsets.pop()
    return [(base + k * trunk_samples, base + (k + 1) * trunk_samples) for k in trunk_ids]


def run_subject_dependent_cv(
    trials: Sequence[TrialRecord], model_config: ModelConfig, cfg: ProtocolConfig
) -> ProtocolResult:
    cfg.validate()
    if not trials:
        raise ProtocolError("no trials given")
    rate = trials[0].sample_rate_hz
    protocol_samples = int(round(cfg.protocol_seconds * rate))
    if protocol_samples % cfg.n_folds != 0:
        raise ProtocolError(
            f"{cfg.protocol_seconds} s at {rate} Hz does not split into {cfg.n_folds} equal trunks"
        )
    trunk_samples = protocol_samples // cfg.n_folds
    window_samples = int(round(cfg.window_seconds * rate))
    if window_samples > trunk_samples:
        raise ProtocolError(
            f"window of {cfg.window_seconds} s does not fit a trunk of {trunk_samples} samples"
        )
    normalized = [baseline_normalize(t) for t in trials]
    labels = _labels_present(normalized, cfg.dimension)
    if not labels:
        raise ProtocolError(f"no trial carries a {cfg.dimension!r} label")
    folds = cfg.folds if cfg.folds is not None else list(range(cfg.n_folds))
    plan = fold_plan(cfg.n_folds)
    units = []
    reports = []
    for fold in folds:
        if not 0 <= fold < cfg.n_folds:
            raise ValidationError(f"fold index {fold} outside 0..{cfg.n_folds - 1}")
        test_k, val_k, train_ks = plan[fold]
        seed_root = np.random.SeedSequence([cfg.seed, 101, fold])
        init_ss, train_ss, val_ss, test_ss = seed_root.spawn(4)
        model = build_model(model_config, np.random.default_rng(init_ss))
        train_ranges = _trunk_ranges(normalized, cfg, train_ks, trunk_samples)
        val_ranges = _trunk_ranges(normalized, cfg, [val_k], trunk_samples)
        test_ranges = _trunk_ranges(normalized, cfg, [test_k], trunk_samples)
        val_size = _balanced_size(cfg.val_draws, len(labels))
        val_segments = balanced_batch(
            normalized, val_size, cfg.window_seconds, np.random.default_rng(val_ss),
            cfg.dimension, val_ranges,
        )
        val_data = segments_to_batch(val_segments)
        train_seconds = len(normalized) * len(train_ks) * (trunk_samples / rate)
        steps = cfg.steps_per_epoch or _steps_from_data(train_seconds, rate, cfg.batch_size)
        sampler = _make_sampler(normalized, cfg.window_seconds, cfg.dimension, train_ranges)
        record = train(
            model, sampler, val_data,
            epochs=cfg.epochs, steps_per_epoch=steps, batch_size=cfg.batch_size,
            lr=cfg.lr, rng=np.random.default_rng(train_ss),
        )
        report = _evaluate(model, normalized, cfg, test_ranges, np.random.default_rng(test_ss))
        reports.append(report)
        units.append(
            {
                "unit": f"fold{fold}",
                "test_trunk": test_k,
                "val_trunk": val_k,
                "report": report.to_dict(),
                "run": record.to_dict(),
            }
        )
    return ProtocolResult(
        protocol="subject_dependent_cv",
        units=units,
        aggregate=_aggregate(reports),
        seed=cfg.seed,
        config={"model": config_to_dict(model_config), "protocol": cfg.to_dict()},
    )


# ---------------------------------------------------------------------------
# leave-one-subject-out


def _group_by_subject(trials: Sequence[TrialRecord]) -> dict[str, list[TrialRecord]]:
    groups: dict[str, list[TrialRecord]] = {}
    for t in trials:
        groups.setdefault(t.subject_id, []).append(t)
    return groups


def run_loocv(
    trials: Sequence[TrialRecord], model_config: ModelConfig, cfg: ProtocolConfig
) -> ProtocolResult:
    cfg.validate()
    groups = _group_by_subject(trials)
    if len(groups) < 2:
        raise ProtocolError(f"leave-one-subject-out needs >= 2 subjects, got {len(groups)}")
    subjects = cfg.subjects if cfg.subjects is not None else list(groups.keys())
    unknown = [s for s in subjects if s not in groups]
    if unknown:
        raise ValidationError(f"unknown subjects {unknown}")
    rate = trials[0].sample_rate_hz
    protocol_samples = int(round(cfg.protocol_seconds * rate))
    stage2_samples = int(round(cfg.stage2_seconds * rate))
    window_samples = int(round(cfg.window_seconds * rate))
    if window_samples > stage2_samples:
        raise ProtocolError("window does not fit the stage-2 span")
    stage2_lr, stage2_epochs = cfg.stage2_lr, cfg.stage2_epochs
    if model_config.variant == "C" and (stage2_lr, stage2_epochs) == (0.001, 400):
        # The mixture head needs a hotter, longer fine-tune by default.
        stage2_lr, stage2_epochs = 0.005, 500
    normalized_by_subject = {
        s: [baseline_normalize(t) for t in group] for s, group in groups.items()
    }
    units = []
    reports = []
    for idx, target in enumerate(subjects):
        seed_root = np.random.SeedSequence([cfg.seed, 202, idx])
        init_ss, s1_ss, s2_ss, test_ss = seed_root.spawn(4)
        others = [t for s, group in normalized_by_subject.items() if s != target for t in group]
        target_trials = normalized_by_subject[target]
        for t in others + target_trials:
            _trim_offset(t, protocol_samples)
        relabeled = consensus_relabel(others)
        model = build_model(model_config, np.random.default_rng(init_ss))

        stage1_seconds = sum(cfg.protocol_seconds for _ in relabeled)
        steps1 = cfg.steps_per_epoch or _steps_from_data(stage1_seconds, rate, cfg.stage1_batch_size)
        stage1_ranges = _protocol_ranges(relabeled, protocol_samples, 0, protocol_samples)
        sampler1 = _make_sampler(relabeled, cfg.window_seconds, cfg.dimension, stage1_ranges)
        run1 = train(
            model, sampler1, None,
            epochs=cfg.stage1_epochs, steps_per_epoch=steps1,
            batch_size=cfg.stage1_batch_size, lr=cfg.stage1_lr,
            rng=np.random.default_rng(s1_ss),
        )

        stage2_ranges = _protocol_ranges(target_trials, protocol_samples, 0, stage2_samples)
        stage2_seconds_total = cfg.stage2_seconds * len(target_trials)
        steps2 = cfg.steps_per_epoch or _steps_from_data(stage2_seconds_total, rate, cfg.stage2_batch_size)
        sampler2 = _make_sampler(target_trials, cfg.window_seconds, cfg.dimension, stage2_ranges)
        run2 = fine_tune(
            model, ("head",), sampler2, None,
            epochs=stage2_epochs, steps_per_epoch=steps2,
            batch_size=cfg.stage2_batch_size, lr=stage2_lr,
            rng=np.random.default_rng(s2_ss),
        )

        eval_ranges = _protocol_ranges(target_trials, protocol_samples, stage2_samples, protocol_samples)
        report = _evaluate(model, target_trials, cfg, eval_ranges, np.random.default_rng(test_ss))
        reports.append(report)
        consensus_labels = {
            t.trial_id: t.labels[cfg.dimension] for t in relabeled if cfg.dimension in t.labels
        }
        units.append(
            {
                "unit": target,
                "report": report.to_dict(),
                "stage1": run1.to_dict(),
                "stage2": run2.to_dict(),
                "stage1_labels": {str(k): v for k, v in sorted(consensus_labels.items())},
            }
        )
    return ProtocolResult(
        protocol="loocv_two_stage",
        units=units,
        aggregate=_aggregate(reports),
        seed=cfg.seed,
        config={"model": config_to_dict(model_config), "protocol": cfg.to_dict()},
    )


def _protocol_ranges(trials, protocol_samples: int, start: int, stop: int) -> list[tuple[int, int]]:
    offsets = {_trim_offset(t, protocol_samples) for t in trials}
    if len(offsets) != 1:
        raise ProtocolError("all trials must have equal length")
    base = offsets.pop()
    return [(base + start, base + stop)]
