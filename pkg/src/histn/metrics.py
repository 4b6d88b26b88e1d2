"""Label encodings and ranking-based evaluation metrics.

Predictions are full rankings: each sample's classes ordered from most
to least plausible, 1-indexed. Alongside standard macro-F1 this module
scores how well the prediction continuum respects label order, via
top-2 accuracy, the near-miss rate Tri-P, and Seq2HR (top-2 hits that
are also consecutive in label space).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, LabelError, MetricError, ParameterError


def smooth_label(true_class: int, num_classes: int, s: float = 0.5) -> np.ndarray:
    """Gaussian bump over class indices, renormalized on 1..num_classes.

    ``p_j proportional to exp(-(j - i)^2 / (2 s^2))`` for true class i.
    Smaller ``s`` approaches a one-hot vector.
    """
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    if not 1 <= true_class <= num_classes:
        raise LabelError(f"class {true_class} outside 1..{num_classes}")
    if s <= 0:
        raise ParameterError(f"smoothing width must be > 0, got {s}")
    j = np.arange(1, num_classes + 1, dtype=np.float64)
    weights = np.exp(-((j - true_class) ** 2) / (2.0 * s * s))
    return weights / weights.sum()


def one_hot(true_class: int, num_classes: int) -> np.ndarray:
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    if not 1 <= true_class <= num_classes:
        raise LabelError(f"class {true_class} outside 1..{num_classes}")
    vec = np.zeros(num_classes, dtype=np.float64)
    vec[true_class - 1] = 1.0
    return vec


def _top_choices(rankings: Sequence[Sequence[int]] | np.ndarray, num_classes: int) -> np.ndarray:
    arr = np.asarray(rankings, dtype=np.int64)
    if arr.ndim != 2:
        raise ContractError(f"rankings must be 2-d (samples x classes), got shape {arr.shape}")
    if arr.shape[1] != num_classes:
        raise ContractError(f"rankings list {arr.shape[1]} classes, expected {num_classes}")
    if arr.min() < 1 or arr.max() > num_classes:
        raise LabelError(f"ranking entries must lie in 1..{num_classes}")
    if not (np.sort(arr, axis=1) == np.arange(1, num_classes + 1)).all():
        raise ContractError("each ranking must be a permutation of 1..num_classes")
    return arr


def _check_truths(truths: Sequence[int] | np.ndarray, n: int, num_classes: int) -> np.ndarray:
    t = np.asarray(truths, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != n:
        raise ContractError(f"need one truth per sample, got {t.shape} for {n} samples")
    if t.size and (t.min() < 1 or t.max() > num_classes):
        raise LabelError(f"truth labels must lie in 1..{num_classes}")
    return t


def confusion_matrix(rankings, truths, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = top-ranked class."""
    arr = _top_choices(rankings, num_classes)
    t = _check_truths(truths, arr.shape[0], num_classes)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for truth, picked in zip(t, arr[:, 0]):
        cm[truth - 1, picked - 1] += 1
    return cm


def per_class_f1(cm: np.ndarray) -> tuple[list[float], list[bool]]:
    """F1 per class in percent, plus which classes are present.

    A class is absent when its row and column are both empty; absent
    classes are reported as 0.0 and excluded from the macro average.
    A present class with an undefined precision or recall counts as 0.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError(f"confusion matrix must be square, got shape {cm.shape}")
    if cm.sum() == 0:
        raise MetricError("confusion matrix is empty")
    k = cm.shape[0]
    scores: list[float] = []
    present: list[bool] = []
    for i in range(k):
        tp = int(cm[i, i])
        row = int(cm[i].sum())
        col = int(cm[:, i].sum())
        if row == 0 and col == 0:
            scores.append(0.0)
            present.append(False)
            continue
        present.append(True)
        precision = tp / col if col > 0 else 0.0
        recall = tp / row if row > 0 else 0.0
        if precision + recall == 0.0:
            scores.append(0.0)
        else:
            scores.append(100.0 * 2.0 * precision * recall / (precision + recall))
    return scores, present


def macro_f1(cm: np.ndarray) -> float:
    """Mean per-class F1 in percent over the classes present in ``cm``."""
    scores, present = per_class_f1(cm)
    kept = [f for f, p in zip(scores, present) if p]
    return sum(kept) / len(kept)


def tri_p(cm: np.ndarray) -> float:
    """Percent of samples whose top pick is within one class of the truth."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ContractError(f"confusion matrix must be square, got shape {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise MetricError("confusion matrix is empty")
    k = cm.shape[0]
    band = sum(int(cm[i, j]) for i in range(k) for j in range(k) if abs(i - j) < 2)
    return 100.0 * band / total


def top2_accuracy(rankings, truths, num_classes: int) -> float:
    """Percent of samples whose truth appears in the top two ranked classes."""
    arr = _top_choices(rankings, num_classes)
    t = _check_truths(truths, arr.shape[0], num_classes)
    if arr.shape[0] == 0:
        raise MetricError("no samples")
    hits = int(((arr[:, 0] == t) | (arr[:, 1] == t)).sum())
    return 100.0 * hits / arr.shape[0]


def seq2hr(rankings, truths, num_classes: int) -> float:
    """Top-2 hits whose two top classes are also consecutive, in percent.

    A sample counts when the truth is among the two top-ranked classes
    and those two classes differ by exactly one.
    """
    arr = _top_choices(rankings, num_classes)
    t = _check_truths(truths, arr.shape[0], num_classes)
    if arr.shape[0] == 0:
        raise MetricError("no samples")
    in_top2 = (arr[:, 0] == t) | (arr[:, 1] == t)
    consecutive = np.abs(arr[:, 0] - arr[:, 1]) == 1
    return 100.0 * int((in_top2 & consecutive).sum()) / arr.shape[0]


# ---------------------------------------------------------------------------
# paired t-test


def _betacf(a: float, b: float, x: float) -> float:
    # Continued fraction for the incomplete beta function (modified
    # Lentz). Converges quickly for x < (a + 1) / (a + b + 2).
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        num = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        num = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            return h
    raise MetricError("incomplete beta continued fraction did not converge")


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns ``(t, p)``.

    ``t = mean(d) / (std(d, ddof=1) / sqrt(n))`` for differences
    ``d = a - b``. Identical differences (zero variance) make the
    statistic undefined and raise.
    """
    xs = np.asarray(a, dtype=np.float64)
    ys = np.asarray(b, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ContractError(f"paired samples must be equal-length vectors, got {xs.shape} and {ys.shape}")
    n = xs.shape[0]
    if n < 2:
        raise ContractError(f"need at least 2 pairs, got {n}")
    d = xs - ys
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise MetricError("paired differences have zero variance; t statistic is undefined")
    t = float(d.mean()) / (sd / math.sqrt(n))
    dof = n - 1
    p = _reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return t, p


# ---------------------------------------------------------------------------
# report bundle


@dataclass
class EvalReport:
    """All evaluation metrics for one set of ranked predictions."""

    num_samples: int
    num_classes: int
    confusion: list[list[int]]
    f1_macro: float
    per_class_f1: list[float]
    top2_accuracy: float
    tri_p: float
    seq2hr: float

    @classmethod
    def from_rankings(cls, rankings, truths, num_classes: int) -> "EvalReport":
        arr = _top_choices(rankings, num_classes)
        cm = confusion_matrix(arr, truths, num_classes)
        scores, _ = per_class_f1(cm)
        return cls(
            num_samples=arr.shape[0],
            num_classes=num_classes,
            confusion=cm.tolist(),
            f1_macro=macro_f1(cm),
            per_class_f1=scores,
            top2_accuracy=top2_accuracy(arr, truths, num_classes),
            tri_p=tri_p(cm),
            seq2hr=seq2hr(arr, truths, num_classes),
        )

    def to_dict(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "num_classes": self.num_classes,
            "confusion": self.confusion,
            "f1_macro": self.f1_macro,
            "per_class_f1": self.per_class_f1,
            "top2_accuracy": self.top2_accuracy,
            "tri_p": self.tri_p,
            "seq2hr": self.seq2hr,
        }
