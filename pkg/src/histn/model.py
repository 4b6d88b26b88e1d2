"""The hierarchical spatial-temporal network.

Three stages:

1. a time head: multi-view temporal convolutions squeezed into one
   series per channel, then average-pooled
2. a graph hierarchy: per level (channel, region, global), two branches
   combine Chebyshev message passing and separable time convolution in
   both orders and average; levels are connected by learned softmax
   fusion of child nodes into each parent
3. a classifier head over the time-pooled features of all levels

Four output variants share stages 1 and 2: ``A`` one-hot cross-entropy
logits, ``B`` a single score trained with MAE, ``C`` a Gaussian mixture
density over the score axis, ``D`` logits trained against
Gaussian-smoothed labels.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    ContractError,
    DataError,
    DimensionError,
    LabelError,
    ParameterError,
    ValidationError,
)
from .graph import GraphHierarchy, build_prior_graph, chebyshev_basis, normalized_laplacian
from .metrics import smooth_label
from .tensor import Tensor

VARIANTS = ("A", "B", "C", "D")
PARAM_GROUPS = ("head", "hierarchy", "classifier")
CHECKPOINT_VERSION = 1

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_PROB_FLOOR = 1e-7
_STD_FLOOR = 1e-6


@dataclass
class ModelConfig:
    hierarchy: GraphHierarchy
    variant: str = "D"
    num_views: int = 4
    head_kernel: int = 5
    head_pool: int = 2
    sep_kernel: int = 5
    num_classes: int = 5
    dropout_rate: float = 0.25
    activation: str = "elu"
    smoothing_s: float = 0.5
    input_samples: int = 128

    @property
    def head_time_steps(self) -> int:
        return (self.input_samples - self.head_kernel + 1) // self.head_pool

    @property
    def output_width(self) -> int:
        if self.variant == "B":
            return 1
        if self.variant == "C":
            return 3 * self.num_classes
        return self.num_classes


@dataclass
class GmmParams:
    """Mixture weights, means, and stds; one component set per sample."""

    weights: Tensor
    means: Tensor
    stds: Tensor


def _validate_config(cfg: ModelConfig) -> None:
    if cfg.variant not in VARIANTS:
        raise ValidationError(f"unknown variant {cfg.variant!r}; expected one of {VARIANTS}")
    if cfg.num_classes < 2:
        raise ValidationError(f"num_classes must be >= 2, got {cfg.num_classes}")
    if cfg.num_views < 1:
        raise ValidationError(f"num_views must be >= 1, got {cfg.num_views}")
    if cfg.input_samples < 1:
        raise ValidationError(f"input_samples must be >= 1, got {cfg.input_samples}")
    if not 1 <= cfg.head_kernel <= cfg.input_samples:
        raise ValidationError(
            f"time head kernel {cfg.head_kernel} does not fit {cfg.input_samples} input samples"
        )
    if cfg.head_pool < 1:
        raise ValidationError(f"head_pool must be >= 1, got {cfg.head_pool}")
    if cfg.head_time_steps < 1:
        raise ValidationError(
            "time head leaves no time steps "
            f"(input {cfg.input_samples}, kernel {cfg.head_kernel}, pool {cfg.head_pool})"
        )
    if cfg.sep_kernel < 1:
        raise ValidationError(f"sep_kernel must be >= 1, got {cfg.sep_kernel}")
    if not 0.0 <= cfg.dropout_rate < 1.0:
        raise ValidationError(f"dropout_rate must be in [0, 1), got {cfg.dropout_rate}")
    if cfg.activation not in ("elu", "relu", "identity"):
        raise ValidationError(f"unknown activation {cfg.activation!r}")
    if cfg.smoothing_s <= 0:
        raise ValidationError(f"smoothing_s must be > 0, got {cfg.smoothing_s}")


def _uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = shape[0]
    fan_out = shape[-1] if len(shape) > 1 else shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class HistnModel:
    """Built network: parameters, fixed graph bases, and the forward pass."""

    def __init__(self, config: ModelConfig):
        _validate_config(config)
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.trainable: dict[str, bool] = {}
        h = config.hierarchy
        self._levels = (
            ("channel", h.channel),
            ("region", h.region),
            ("global", h.global_level),
        )
        self._bases = {
            name: [
                Tensor(matrix)
                for matrix in chebyshev_basis(normalized_laplacian(g), g.cheb_degree)
            ]
            for name, g in self._levels
        }

    # -- parameter bookkeeping ------------------------------------------

    def _register(self, name: str, values: np.ndarray, group: str) -> None:
        self.params[name] = Tensor(values, requires_grad=True)
        self.groups[name] = group
        self.trainable[name] = True

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        if not trainable_only:
            return dict(self.params)
        return {n: p for n, p in self.params.items() if self.trainable[n]}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze(self, groups: Sequence[str]) -> None:
        unknown = set(groups) - set(PARAM_GROUPS)
        if unknown:
            raise ValidationError(f"unknown parameter groups {sorted(unknown)}; expected {PARAM_GROUPS}")
        for name, group in self.groups.items():
            if group in groups:
                self.trainable[name] = False

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise DataError(f"parameter names do not match (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, values in arrays.items():
            arr = np.asarray(values, dtype=np.float64)
            if arr.shape != self.params[name].shape:
                raise DataError(f"parameter {name} has shape {arr.shape}, expected {self.params[name].shape}")
            self.params[name].data = arr.copy()

    # -- forward ---------------------------------------------------------

    def _squeezed_head(self, x: Tensor) -> Tensor:
        # The squeeze is a linear mix of the per-view convolutions, so a
        # single convolution with the squeezed kernel computes the same
        # function (and gradients) at a quarter of the conv work.
        cfg = self.config
        squeeze_col = T.reshape(self.params["head.squeeze"], (cfg.num_views, 1))
        kernel = T.matmul(self.params["head.view_kernels"], squeeze_col)
        kernel = T.broadcast_col(kernel, self.config.hierarchy.num_channels)
        bias = T.matmul(T.reshape(self.params["head.view_bias"], (1, cfg.num_views)), squeeze_col)
        out = T.depthwise_time_conv(x, kernel)
        out = T.shift(out, T.reshape(bias, ()))
        out = T.activation(out, cfg.activation)
        return T.avg_pool_time(out, cfg.head_pool)

    def _cheb_operator(self, level: str, branch: str) -> Tensor:
        basis = self._bases[level]
        beta = self.params[f"{level}.{branch}.beta"]
        acc = T.scale(basis[0], T.index_scalar(beta, 0))
        for k in range(1, len(basis)):
            acc = T.add(acc, T.scale(basis[k], T.index_scalar(beta, k)))
        return acc

    def _message_pass(self, level: str, branch: str, x: Tensor) -> Tensor:
        # The Chebyshev operator is symmetric, so right-multiplying the
        # time-major features equals node-major left multiplication.
        return T.activation(T.matmul(x, self._cheb_operator(level, branch)), self.config.activation)

    def _sep_conv(self, level: str, branch: str, x: Tensor) -> Tensor:
        k = self.config.sep_kernel
        lo = (k - 1) // 2
        out = T.pad_time(x, lo, k - 1 - lo)
        out = T.depthwise_time_conv(
            out, self.params[f"{level}.{branch}.dw_kernel"], self.params[f"{level}.{branch}.dw_bias"]
        )
        out = T.pointwise_mix(
            out, self.params[f"{level}.{branch}.pw_weight"], self.params[f"{level}.{branch}.pw_bias"]
        )
        return T.activation(out, self.config.activation)

    def _level_block(self, level: str, x: Tensor) -> Tensor:
        first = self._sep_conv(level, "b1", self._message_pass(level, "b1", x))
        second = self._message_pass(level, "b2", self._sep_conv(level, "b2", x))
        return T.mul_const(T.add(first, second), 0.5)

    def _fuse(self, x: Tensor, parents: Sequence[tuple[str, tuple[int, ...]]], prefix: str) -> Tensor:
        columns = []
        for name, child_idx in parents:
            children = T.gather_last(x, child_idx)
            summary = T.mean_axis(children, -2)
            scores = T.pointwise_mix(
                summary, self.params[f"{prefix}.{name}.weight"], self.params[f"{prefix}.{name}.bias"]
            )
            weights = T.softmax(scores, axis=-1)
            columns.append(T.weighted_sum_cols(children, weights))
        return T.concat_last(columns)

    def _forward(self, batch, training: bool, rng: np.random.Generator | None):
        cfg = self.config
        h = cfg.hierarchy
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 3:
            raise DimensionError(f"batch must be 3-d (B, T, C), got shape {x.shape}")
        if x.shape[1] != cfg.input_samples or x.shape[2] != h.num_channels:
            raise DimensionError(
                f"batch shape {x.shape} does not match (B, {cfg.input_samples}, {h.num_channels})"
            )
        pooled = self._squeezed_head(x)
        channel_out = self._level_block("channel", pooled)
        region_parents = [(name, h.region_child_indices(name)) for name in h.region.node_names]
        region_in = self._fuse(channel_out, region_parents, "fusion.region")
        region_out = self._level_block("region", region_in)
        global_parents = [("global", tuple(range(h.num_regions)))]
        global_in = self._fuse(region_out, global_parents, "fusion")
        global_out = self._level_block("global", global_in)
        stacked = T.concat_last([channel_out, region_out, global_out])
        features = T.mean_axis(stacked, -2)
        head_in = features
        if training and cfg.dropout_rate > 0.0:
            if rng is None:
                raise ContractError("training forward with dropout needs an rng")
            head_in = T.dropout(head_in, cfg.dropout_rate, rng)
        out = T.pointwise_mix(head_in, self.params["classifier.weight"], self.params["classifier.bias"])
        if cfg.variant == "C":
            k = cfg.num_classes
            output = GmmParams(
                weights=T.softmax(T.slice_last(out, 0, k), axis=-1),
                means=T.slice_last(out, k, 2 * k),
                stds=T.add_const(T.softplus(T.slice_last(out, 2 * k, 3 * k)), _STD_FLOOR),
            )
        else:
            output = out
        return output, features

    def forward(self, batch, training: bool = False, rng: np.random.Generator | None = None):
        output, _ = self._forward(batch, training, rng)
        return output

    def forward_with_features(self, batch, training: bool = False, rng: np.random.Generator | None = None):
        return self._forward(batch, training, rng)

    def loss(self, outputs, targets) -> Tensor:
        return variant_loss(
            self.config.variant, outputs, targets, self.config.num_classes, self.config.smoothing_s
        )

    def predict_ranking(self, outputs) -> np.ndarray:
        return predict_ranking(self.config.variant, outputs, self.config.num_classes)


def build_model(config: ModelConfig, rng: np.random.Generator) -> HistnModel:
    """Initialize all parameters; the draw order is fixed so equal seeds
    build identical models."""
    model = HistnModel(config)
    cfg = config
    h = cfg.hierarchy
    c = h.num_channels

    model._register("head.view_kernels", _uniform(rng, (cfg.head_kernel, cfg.num_views)), "head")
    model._register("head.view_bias", np.zeros(cfg.num_views), "head")
    model._register("head.squeeze", np.full(cfg.num_views, 1.0 / cfg.num_views), "head")

    for level, graph in model._levels:
        n = graph.num_nodes
        for branch in ("b1", "b2"):
            model._register(f"{level}.{branch}.beta", _uniform(rng, (graph.cheb_degree + 1,)), "hierarchy")
            model._register(f"{level}.{branch}.dw_kernel", _uniform(rng, (cfg.sep_kernel, n)), "hierarchy")
            model._register(f"{level}.{branch}.dw_bias", np.zeros(n), "hierarchy")
            model._register(f"{level}.{branch}.pw_weight", _uniform(rng, (n, n)), "hierarchy")
            model._register(f"{level}.{branch}.pw_bias", np.zeros(n), "hierarchy")

    for name in h.region.node_names:
        width = len(h.region_children[name])
        model._register(f"fusion.region.{name}.weight", _uniform(rng, (width, width)), "hierarchy")
        model._register(f"fusion.region.{name}.bias", np.zeros(width), "hierarchy")
    r = h.num_regions
    model._register("fusion.global.weight", _uniform(rng, (r, r)), "hierarchy")
    model._register("fusion.global.bias", np.zeros(r), "hierarchy")

    model._register(
        "classifier.weight", _uniform(rng, (h.feature_width, cfg.output_width)), "classifier"
    )
    model._register("classifier.bias", np.zeros(cfg.output_width), "classifier")
    return model


def count_parameters(model: HistnModel, trainable_only: bool = False) -> int:
    return sum(p.size for p in model.parameters(trainable_only).values())


# ---------------------------------------------------------------------------
# standalone building blocks


def cheb_graph_conv(x: Tensor, basis: Sequence, beta: Tensor, activation: str = "identity") -> Tensor:
    """Graph convolution ``act(sum_k beta_k T_k(L) @ x)`` on node-major ``x`` (n, T)."""
    mats = [b if isinstance(b, Tensor) else Tensor(b) for b in basis]
    if beta.data.ndim != 1 or beta.shape[0] != len(mats):
        raise DimensionError(f"beta shape {beta.shape} does not match basis of {len(mats)} matrices")
    if x.data.ndim != 2 or mats[0].shape[1] != x.shape[0]:
        raise DimensionError(f"x shape {x.shape} does not match basis node count {mats[0].shape}")
    acc = T.scale(mats[0], T.index_scalar(beta, 0))
    for k in range(1, len(mats)):
        acc = T.add(acc, T.scale(mats[k], T.index_scalar(beta, k)))
    return T.activation(T.matmul(acc, x), activation)


def node_fusion(children: Sequence[Tensor], weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """Fuse child series (each (T, 1)) into one parent series.

    The children's time means are scored by one dense layer and turned
    into softmax weights; the parent is the weighted sum of children.
    Returns ``(parent (T, 1), weights (N,))``.
    """
    if not children:
        raise ContractError("node_fusion needs at least one child")
    for ch in children:
        if ch.data.ndim != 2 or ch.shape[1] != 1:
            raise DimensionError(f"each child must be (T, 1), got {ch.shape}")
    stacked = T.concat_last(list(children))
    n = len(children)
    summary = T.reshape(T.mean_axis(stacked, -2), (1, n))
    scores = T.pointwise_mix(summary, weight, bias)
    weights = T.reshape(T.softmax(scores, axis=-1), (n,))
    return T.weighted_sum_cols(stacked, weights), weights


# ---------------------------------------------------------------------------
# losses and ranking


def _check_targets(targets, num_classes: int) -> np.ndarray:
    t = np.asarray(targets)
    if t.ndim != 1:
        raise ContractError(f"targets must be a vector, got shape {t.shape}")
    if t.size == 0:
        raise ContractError("targets are empty")
    if not np.all(np.equal(np.mod(t, 1), 0)):
        raise LabelError("targets must be integers")
    t = t.astype(np.int64)
    if t.min() < 1 or t.max() > num_classes:
        raise LabelError(f"targets must lie in 1..{num_classes}")
    return t


def variant_loss(variant: str, outputs, targets, num_classes: int, smoothing_s: float = 0.5) -> Tensor:
    """Scalar training loss for one batch of raw forward outputs."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    t = _check_targets(targets, num_classes)
    n = t.shape[0]

    if variant in ("A", "D"):
        logits = outputs
        if logits.shape != (n, num_classes):
            raise DimensionError(f"logits shape {logits.shape} != ({n}, {num_classes})")
        if variant == "A":
            target_rows = np.zeros((n, num_classes))
            target_rows[np.arange(n), t - 1] = 1.0
        else:
            target_rows = np.stack([smooth_label(int(y), num_classes, smoothing_s) for y in t])
        probs = T.clamp(T.softmax(logits, axis=-1), _PROB_FLOOR, 1.0)
        picked = T.mul(Tensor(target_rows), T.t_log(probs))
        return T.mul_const(T.t_sum(picked), -1.0 / n)

    if variant == "B":
        scores = outputs
        if scores.shape != (n, 1):
            raise DimensionError(f"scores shape {scores.shape} != ({n}, 1)")
        truth = Tensor(t.astype(np.float64).reshape(n, 1))
        return T.t_mean(T.t_abs(T.sub(scores, truth)))

    gmm = outputs
    if not isinstance(gmm, GmmParams):
        raise ContractError("variant C loss needs GmmParams outputs")
    if gmm.weights.shape != (n, num_classes):
        raise DimensionError(f"mixture shape {gmm.weights.shape} != ({n}, {num_classes})")
    truth = Tensor(np.repeat(t.astype(np.float64)[:, None], num_classes, axis=1))
    z = T.div(T.sub(truth, gmm.means), gmm.stds)
    dens = T.div(T.t_exp(T.mul_const(T.mul(z, z), -0.5)), gmm.stds)
    mixture = T.sum_axis(T.mul(gmm.weights, T.mul_const(dens, _INV_SQRT_2PI)), -1)
    return T.neg(T.t_mean(T.t_log(T.clamp(mixture, _PROB_FLOOR, None))))


def _gmm_class_scores(weights: np.ndarray, means: np.ndarray, stds: np.ndarray, num_classes: int) -> np.ndarray:
    classes = np.arange(1, num_classes + 1, dtype=np.float64)
    z = (classes[None, None, :] - means[:, :, None]) / stds[:, :, None]
    dens = np.exp(-0.5 * z * z) / stds[:, :, None] * _INV_SQRT_2PI
    return (weights[:, :, None] * dens).sum(axis=1)


def predict_ranking(variant: str, outputs, num_classes: int) -> np.ndarray:
    """Rank all classes per sample, best first, 1-indexed.

    Ties order toward the smaller class index. Variant B clips its
    score into [1, num_classes] and ranks classes by distance to it.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")

    if variant == "C":
        if isinstance(outputs, GmmParams):
            w, m, s = outputs.weights.data, outputs.means.data, outputs.stds.data
        else:
            w, m, s = (np.asarray(part, dtype=np.float64) for part in outputs)
        scores = _gmm_class_scores(w, m, s, num_classes)
        return np.argsort(-scores, axis=1, kind="stable") + 1

    values = outputs.data if isinstance(outputs, Tensor) else np.asarray(outputs, dtype=np.float64)
    if variant == "B":
        if values.ndim == 2 and values.shape[1] == 1:
            values = values[:, 0]
        if values.ndim != 1:
            raise DimensionError(f"variant B scores must be (B,) or (B, 1), got {values.shape}")
        clipped = np.clip(values, 1.0, float(num_classes))
        classes = np.arange(1, num_classes + 1, dtype=np.float64)
        distance = np.abs(clipped[:, None] - classes[None, :])
        return np.argsort(distance, axis=1, kind="stable") + 1

    if values.ndim != 2 or values.shape[1] != num_classes:
        raise DimensionError(f"logits must be (B, {num_classes}), got {values.shape}")
    return np.argsort(-values, axis=1, kind="stable") + 1


# ---------------------------------------------------------------------------
# checkpoints


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "variant": cfg.variant,
        "num_views": cfg.num_views,
        "head_kernel": cfg.head_kernel,
        "head_pool": cfg.head_pool,
        "sep_kernel": cfg.sep_kernel,
        "num_classes": cfg.num_classes,
        "dropout_rate": cfg.dropout_rate,
        "activation": cfg.activation,
        "smoothing_s": cfg.smoothing_s,
        "input_samples": cfg.input_samples,
        "graph": cfg.hierarchy.to_spec(),
    }


def config_from_dict(data: Mapping) -> ModelConfig:
    expected = {
        "variant", "num_views", "head_kernel", "head_pool", "sep_kernel",
        "num_classes", "dropout_rate", "activation", "smoothing_s",
        "input_samples", "graph",
    }
    unknown = set(data.keys()) - expected
    if unknown:
        raise ValidationError(f"unknown model config keys {sorted(unknown)}")
    missing = expected - set(data.keys())
    if missing:
        raise ValidationError(f"model config is missing keys {sorted(missing)}")
    graph_spec = dict(data["graph"])
    channels = graph_spec.pop("channels", None)
    degrees = graph_spec.pop("cheb_degrees", None)
    hierarchy = build_prior_graph(graph_spec, channels=channels, cheb_degrees=degrees)
    return ModelConfig(
        hierarchy=hierarchy,
        variant=data["variant"],
        num_views=int(data["num_views"]),
        head_kernel=int(data["head_kernel"]),
        head_pool=int(data["head_pool"]),
        sep_kernel=int(data["sep_kernel"]),
        num_classes=int(data["num_classes"]),
        dropout_rate=float(data["dropout_rate"]),
        activation=data["activation"],
        smoothing_s=float(data["smoothing_s"]),
        input_samples=int(data["input_samples"]),
    )


def _params_payload(model: HistnModel) -> dict:
    return {
        name: {"shape": list(p.shape), "values": p.data.ravel().tolist()}
        for name, p in model.params.items()
    }


def _params_checksum(payload: dict) -> int:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return zlib.crc32(canonical)


def save_checkpoint(model: HistnModel, path: str | Path) -> None:
    payload = _params_payload(model)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_to_dict(model.config),
        "params": payload,
        "checksum": _params_checksum(payload),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> HistnModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} does not exist") from None
    except json.JSONDecodeError as err:
        raise DataError(f"checkpoint {path} is not valid JSON: {err}") from None
    for key in ("format_version", "config", "params", "checksum"):
        if key not in doc:
            raise DataError(f"checkpoint {path} is missing {key!r}")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint format version {doc['format_version']} is not supported (expected {CHECKPOINT_VERSION})"
        )
    if _params_checksum(doc["params"]) != doc["checksum"]:
        raise DataError(f"checkpoint {path} failed its checksum; the file is corrupt")
    cfg = config_from_dict(doc["config"])
    if expected_config is not None:
        want = config_to_dict(expected_config)
        got = config_to_dict(cfg)
        if want != got:
            diffs = [k for k in want if want[k] != got[k]]
            raise DataError(f"checkpoint config does not match expected config (differs in {diffs})")
    model = build_model(cfg, np.random.default_rng(0))
    arrays = {}
    for name, entry in doc["params"].items():
        arrays[name] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
    model.load_arrays(arrays)
    return model
