"""Dataset format, windowing, batch sampling, and the synthetic corpus.

A dataset is a JSON manifest naming trials plus one binary signal file
per trial segment. Signal files carry a 16-byte header (magic ``HSTN``,
format u32, channels u32, samples u32, little-endian) followed by
float64 samples in channel-major row order.

The synthetic generator emits an ordinal five-class corpus shaped like
a 14-channel, 128 Hz emotion-rating recording: per trial a 60 s
stimulus window plus a 60 s pure-noise baseline, with class-dependent
oscillations (amplitude on one channel group scales with the class and
the frequency shifts per class) so nearby classes look more alike than
distant ones.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    DataError,
    DimensionError,
    LabelError,
    ParameterError,
    ValidationError,
)
from .graph import DREAMER_CHANNELS

MAGIC = b"HSTN"
SIGNAL_FORMAT = 1
DIMENSIONS = ("valence", "arousal")


# ---------------------------------------------------------------------------
# binary signal files


def write_signal(path: str | Path, values: np.ndarray) -> None:
    """Write a (channels, samples) float64 array with the 16-byte header."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"signal must be 2-d (channels, samples), got shape {arr.shape}")
    header = struct.pack("<4sIII", MAGIC, SIGNAL_FORMAT, arr.shape[0], arr.shape[1])
    Path(path).write_bytes(header + arr.astype("<f8").tobytes())


def read_signal(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"signal file {path} does not exist") from None
    if len(raw) < 16:
        raise DataError(f"signal file {path} is truncated (no header)")
    magic, fmt, channels, samples = struct.unpack("<4sIII", raw[:16])
    if magic != MAGIC:
        raise DataError(f"signal file {path} has bad magic {magic!r}")
    if fmt != SIGNAL_FORMAT:
        raise DataError(f"signal file {path} uses unsupported format {fmt}")
    expected = 16 + channels * samples * 8
    if len(raw) != expected:
        raise DataError(f"signal file {path} has {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8", offset=16)
    return flat.reshape(channels, samples).astype(np.float64)


# ---------------------------------------------------------------------------
# manifests and trials


@dataclass
class TrialRecord:
    """One trial: signal and baseline as (C, N) arrays plus its labels."""

    subject_id: str
    trial_id: int
    signal: np.ndarray
    baseline: np.ndarray
    sample_rate_hz: int
    labels: dict[str, int]

    @property
    def seconds(self) -> float:
        return self.signal.shape[1] / self.sample_rate_hz


@dataclass
class DatasetManifest:
    channels: tuple[str, ...]
    sample_rate_hz: int
    trials: list[dict]
    root: Path

    @property
    def num_channels(self) -> int:
        return len(self.channels)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as err:
        raise DataError(f"manifest {path} is not valid JSON: {err}") from None
    allowed = {"channels", "sample_rate_hz", "trials"}
    unknown = set(doc.keys()) - allowed
    if unknown:
        raise ValidationError(f"manifest has unknown keys {sorted(unknown)}")
    missing = allowed - set(doc.keys())
    if missing:
        raise ValidationError(f"manifest is missing keys {sorted(missing)}")
    channels = tuple(doc["channels"])
    if not channels or len(set(channels)) != len(channels):
        raise ValidationError("manifest channels must be a non-empty unique list")
    rate = doc["sample_rate_hz"]
    if not isinstance(rate, int) or rate < 1:
        raise ValidationError(f"sample_rate_hz must be a positive integer, got {rate!r}")
    if not isinstance(doc["trials"], list) or not doc["trials"]:
        raise ValidationError("manifest must list at least one trial")
    trial_keys = {"subject", "trial", "labels", "signal", "baseline"}
    for i, entry in enumerate(doc["trials"]):
        unknown = set(entry.keys()) - trial_keys
        if unknown:
            raise ValidationError(f"trial entry {i} has unknown keys {sorted(unknown)}")
        missing = trial_keys - set(entry.keys())
        if missing:
            raise ValidationError(f"trial entry {i} is missing keys {sorted(missing)}")
        labels = entry["labels"]
        if set(labels.keys()) - set(DIMENSIONS):
            raise ValidationError(
                f"trial entry {i} labels must use dimensions {DIMENSIONS}, got {sorted(labels)}"
            )
    return DatasetManifest(channels=channels, sample_rate_hz=rate, trials=doc["trials"], root=path.parent)


def load_dataset(manifest_path: str | Path) -> list[TrialRecord]:
    """Load every trial named by the manifest, validating shapes."""
    manifest = load_manifest(manifest_path)
    records = []
    for entry in manifest.trials:
        subject, trial = entry["subject"], entry["trial"]
        signal = read_signal(manifest.root / entry["signal"])
        baseline = read_signal(manifest.root / entry["baseline"])
        for name, arr in (("signal", signal), ("baseline", baseline)):
            if arr.shape[0] != manifest.num_channels:
                raise DataError(
                    f"{name} of subject {subject} trial {trial} has {arr.shape[0]} channels, "
                    f"manifest lists {manifest.num_channels}"
                )
        records.append(
            TrialRecord(
                subject_id=str(subject),
                trial_id=int(trial),
                signal=signal,
                baseline=baseline,
                sample_rate_hz=manifest.sample_rate_hz,
                labels={k: int(v) for k, v in entry["labels"].items()},
            )
        )
    return records


def baseline_normalize(trial: TrialRecord) -> TrialRecord:
    """Z-score each channel of the signal by its baseline mean and std."""
    mean = trial.baseline.mean(axis=1, keepdims=True)
    std = trial.baseline.std(axis=1, keepdims=True)
    flat = np.nonzero(std[:, 0] == 0.0)[0]
    if flat.size:
        raise DataError(
            f"baseline of subject {trial.subject_id} trial {trial.trial_id} is constant "
            f"on channel index {int(flat[0])}"
        )
    return TrialRecord(
        subject_id=trial.subject_id,
        trial_id=trial.trial_id,
        signal=(trial.signal - mean) / std,
        baseline=trial.baseline,
        sample_rate_hz=trial.sample_rate_hz,
        labels=dict(trial.labels),
    )


# ---------------------------------------------------------------------------
# windows and batches


@dataclass
class Segment:
    """A window into a trial's signal. ``window`` is a view, not a copy."""

    window: np.ndarray
    label: int
    subject_id: str
    trial_id: int
    offset: int


def window_sample(trial: TrialRecord, start: int, seconds: float, dimension: str = "valence") -> Segment:
    if dimension not in trial.labels:
        raise LabelError(f"trial has no {dimension!r} label")
    width = int(round(seconds * trial.sample_rate_hz))
    if width < 1:
        raise ParameterError(f"window of {seconds} s is empty at {trial.sample_rate_hz} Hz")
    total = trial.signal.shape[1]
    if start < 0 or start + width > total:
        raise DimensionError(f"window [{start}, {start + width}) outside signal of {total} samples")
    return Segment(
        window=trial.signal[:, start : start + width],
        label=trial.labels[dimension],
        subject_id=trial.subject_id,
        trial_id=trial.trial_id,
        offset=start,
    )


def _starts_in_ranges(total: int, width: int, ranges: Sequence[tuple[int, int]] | None) -> list[tuple[int, int]]:
    # Each entry is (range_start, count of valid window starts inside it).
    if ranges is None:
        ranges = [(0, total)]
    spans = []
    for lo, hi in ranges:
        lo, hi = int(lo), int(hi)
        if lo < 0 or hi > total or lo >= hi:
            raise ParameterError(f"range [{lo}, {hi}) invalid for signal of {total} samples")
        count = hi - lo - width + 1
        if count > 0:
            spans.append((lo, count))
    return spans


def balanced_batch(
    trials: Sequence[TrialRecord],
    batch_size: int,
    window_seconds: float,
    rng: np.random.Generator,
    dimension: str = "valence",
    ranges: Sequence[tuple[int, int]] | None = None,
) -> list[Segment]:
    """Draw a label-balanced batch of windows, uniform over (trial, offset).

    ``ranges`` restricts window starts so each window lies inside one of
    the half-open sample ranges (the same ranges apply to every trial).
    """
    if not trials:
        raise ContractError("no trials to sample from")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    labels = sorted({t.labels[dimension] for t in trials if dimension in t.labels})
    if not labels:
        raise LabelError(f"no trial carries a {dimension!r} label")
    if batch_size % len(labels) != 0:
        raise ParameterError(
            f"batch_size {batch_size} is not divisible by the {len(labels)} labels present"
        )
    per_label = batch_size // len(labels)
    width = int(round(window_seconds * trials[0].sample_rate_hz))
    segments: list[Segment] = []
    for label in labels:
        pool = []
        total = 0
        for trial in trials:
            if trial.labels.get(dimension) != label:
                continue
            for lo, count in _starts_in_ranges(trial.signal.shape[1], width, ranges):
                pool.append((trial, lo, total))
                total += count
        if total == 0:
            raise DataError(f"label {label} has no window wide enough for {window_seconds} s")
        cuts = [entry[2] for entry in pool]
        draws = rng.integers(0, total, size=per_label)
        for draw in draws:
            slot = int(np.searchsorted(cuts, draw, side="right")) - 1
            trial, lo, base = pool[slot]
            start = lo + int(draw) - base
            segments.append(window_sample(trial, start, window_seconds, dimension))
    order = rng.permutation(len(segments))
    return [segments[i] for i in order]


def segments_to_batch(segments: Sequence[Segment]) -> tuple[np.ndarray, np.ndarray]:
    """Stack segments into (B, T, C) inputs and (B,) integer labels."""
    if not segments:
        raise ContractError("no segments to stack")
    x = np.stack([seg.window.T for seg in segments])
    y = np.asarray([seg.label for seg in segments], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# consensus relabeling


def consensus_relabel(trials: Sequence[TrialRecord]) -> list[TrialRecord]:
    """Replace each label with the modal score across subjects per trial id.

    Ties break toward the value closest to the group mean, then toward
    the smaller score.
    """
    if not trials:
        raise ContractError("no trials to relabel")
    by_trial: dict[int, list[TrialRecord]] = {}
    for t in trials:
        by_trial.setdefault(t.trial_id, []).append(t)
    consensus: dict[int, dict[str, int]] = {}
    for trial_id, group in by_trial.items():
        merged: dict[str, int] = {}
        dims = {d for t in group for d in t.labels}
        for dim in sorted(dims):
            scores = [t.labels[dim] for t in group if dim in t.labels]
            counts: dict[int, int] = {}
            for s in scores:
                counts[s] = counts.get(s, 0) + 1
            top = max(counts.values())
            tied = sorted(v for v, k in counts.items() if k == top)
            mean = sum(scores) / len(scores)
            merged[dim] = min(tied, key=lambda v: (abs(v - mean), v))
        consensus[trial_id] = merged
    return [
        TrialRecord(
            subject_id=t.subject_id,
            trial_id=t.trial_id,
            signal=t.signal,
            baseline=t.baseline,
            sample_rate_hz=t.sample_rate_hz,
            labels={d: consensus[t.trial_id][d] for d in t.labels},
        )
        for t in trials
    ]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    """Controls for the synthetic ordinal corpus; one seed fixes everything."""

    subjects: int = 23
    trials_per_subject: int = 18
    channels: tuple[str, ...] = DREAMER_CHANNELS
    sample_rate_hz: int = 128
    stimulus_seconds: float = 60.0
    baseline_seconds: float = 60.0
    num_classes: int = 5
    noise_std: float = 1.0
    label_jitter: float = 0.2
    gain_low: float = 0.8
    gain_high: float = 1.2
    base_freq_hz: float = 6.0
    freq_step_hz: float = 1.5
    freq_jitter_hz: float = 1.0
    base_amp: float = 1.0
    amp_step: float = 0.35
    leak_amp: float = 0.25
    arousal_base_freq_hz: float = 16.0
    arousal_freq_step_hz: float = 1.5
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Mapping) -> "SynthSpec":
        fields = {f for f in cls.__dataclass_fields__}
        unknown = set(data.keys()) - fields
        if unknown:
            raise ValidationError(f"unknown synth spec keys {sorted(unknown)}")
        merged = dict(data)
        if "channels" in merged:
            merged["channels"] = tuple(merged["channels"])
        return cls(**merged)

    def validate(self) -> None:
        if self.subjects < 1 or self.trials_per_subject < 1:
            raise ValidationError("need at least one subject and one trial")
        if not self.channels or len(set(self.channels)) != len(self.channels):
            raise ValidationError("channels must be non-empty and unique")
        if self.sample_rate_hz < 1:
            raise ValidationError("sample_rate_hz must be positive")
        if self.stimulus_seconds <= 0 or self.baseline_seconds <= 0:
            raise ValidationError("durations must be positive")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.freq_jitter_hz < 0:
            raise ValidationError("freq_jitter_hz must be >= 0")
        if not 0.0 <= self.label_jitter <= 1.0:
            raise ValidationError("label_jitter must be in [0, 1]")


def _consensus_score(trial_index: int, num_classes: int, stride: int) -> int:
    return (trial_index * stride) % num_classes + 1


def _jitter(score: int, num_classes: int, p: float, rng: np.random.Generator) -> int:
    u = rng.random()
    if u < p / 2:
        score -= 1
    elif u < p:
        score += 1
    return int(np.clip(score, 1, num_classes))


def synth_generate(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write the synthetic corpus to ``out_dir``; returns the manifest path.

    Valence modulates the first quarter of the channel list (amplitude
    grows with the score, frequency shifts per score); arousal does the
    same on the last quarter in a higher band. Per-subject gain and
    reported-label jitter give subjects individuality; baselines are
    pure noise. Equal specs produce byte-identical trees.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    c = len(spec.channels)
    quarter = max(1, c // 4)
    valence_rows = np.arange(quarter)
    arousal_rows = np.arange(c - quarter, c)
    n_sig = int(round(spec.stimulus_seconds * spec.sample_rate_hz))
    n_base = int(round(spec.baseline_seconds * spec.sample_rate_hz))
    t_sig = np.arange(n_sig) / spec.sample_rate_hz

    entries = []
    for s in range(spec.subjects):
        subject = f"S{s + 1:02d}"
        gain = rng.uniform(spec.gain_low, spec.gain_high)
        for trial in range(spec.trials_per_subject):
            v_true = _consensus_score(trial, spec.num_classes, 1)
            a_true = _consensus_score(trial, spec.num_classes, 3)
            v_label = _jitter(v_true, spec.num_classes, spec.label_jitter, rng)
            a_label = _jitter(a_true, spec.num_classes, spec.label_jitter, rng)

            signal = rng.standard_normal((c, n_sig)) * spec.noise_std
            phases = rng.uniform(0.0, 2.0 * np.pi, size=(2, c))
            # Per-trial detuning: with the default step 1.5 and jitter 1.0,
            # adjacent class bands overlap by 0.5 Hz while bands two or more
            # steps apart never meet, so only nearby scores are confusable.
            detune = rng.uniform(-spec.freq_jitter_hz, spec.freq_jitter_hz, size=2)

            f_v = spec.base_freq_hz + (v_label - 1) * spec.freq_step_hz + detune[0]
            amp_v = np.full(c, spec.leak_amp * gain)
            amp_v[valence_rows] = gain * (spec.base_amp + spec.amp_step * (v_label - 1))
            signal += amp_v[:, None] * np.sin(2.0 * np.pi * f_v * t_sig + phases[0][:, None])

            f_a = spec.arousal_base_freq_hz + (a_label - 1) * spec.arousal_freq_step_hz + detune[1]
            amp_a = np.full(c, spec.leak_amp * gain)
            amp_a[arousal_rows] = gain * (spec.base_amp + spec.amp_step * (a_label - 1))
            signal += amp_a[:, None] * np.sin(2.0 * np.pi * f_a * t_sig + phases[1][:, None])

            baseline = rng.standard_normal((c, n_base)) * spec.noise_std

            sig_name = f"{subject}_T{trial + 1:02d}.f64"
            base_name = f"{subject}_T{trial + 1:02d}_base.f64"
            write_signal(out_dir / sig_name, signal)
            write_signal(out_dir / base_name, baseline)
            entries.append(
                {
                    "subject": subject,
                    "trial": trial + 1,
                    "labels": {"valence": v_label, "arousal": a_label},
                    "signal": sig_name,
                    "baseline": base_name,
                }
            )

    manifest = {
        "channels": list(spec.channels),
        "sample_rate_hz": spec.sample_rate_hz,
        "trials": entries,
    }
    manifest_path = out_dir / "manifest.json"
    tmp = manifest_path.with_name(manifest_path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1))
    tmp.replace(manifest_path)
    return manifest_path
