"""Built-in self checks, runnable without any dataset.

Five groups: the worked non-commutativity example on fixed matrices,
the label-smoothing reference vector, finite-difference gradient checks
for every differentiable operation plus an end-to-end toy network, a
coefficient-expansion oracle for the Chebyshev basis, and brute-force
re-implementations of all ranking metrics on random inputs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import build_hierarchy, chebyshev_basis, normalized_laplacian
from .metrics import (
    macro_f1,
    paired_t_test,
    seq2hr,
    smooth_label,
    top2_accuracy,
    tri_p,
)
from .metrics import confusion_matrix as _confusion
from .model import ModelConfig, build_model
from .tensor import Tensor, grad_check

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
CHEB_TOLERANCE = 1e-9


@dataclass
class CheckResult:
    group: str
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"group": self.group, "name": self.name, "passed": self.passed, "detail": self.detail}


# ---------------------------------------------------------------------------
# group 1: order of message passing and time convolution matters

S1_ADJACENCY_MIX = np.array([[1.0, 0.5], [0.5, 1.0]])
S1_SIGNAL = np.array([[1.0, 3.0, -1.0, -2.0], [-1.0, 2.0, 1.0, 0.0]])
S1_KERNELS = np.array([[-1.0, 2.0], [3.0, 1.0]])
S1_MIX_THEN_CONV = np.array([[7.5, -5.0, -3.5], [2.0, 11.0, 0.5]])
S1_CONV_THEN_MIX = np.array([[4.5, -1.5, -1.5], [1.5, 4.5, 1.5]])


def check_order_sensitivity(conv_fn=None) -> list[CheckResult]:
    """Both operation orders on the fixed 2-channel example, checked exactly."""
    conv = conv_fn or T.depthwise_time_conv
    results = []
    mixed = T.matmul(Tensor(S1_ADJACENCY_MIX), Tensor(S1_SIGNAL))
    first = conv(Tensor(mixed.data.T), Tensor(S1_KERNELS.T)).data.T
    results.append(
        CheckResult(
            "order_sensitivity",
            "mix_then_conv",
            bool(np.array_equal(first, S1_MIX_THEN_CONV)),
            f"expected {S1_MIX_THEN_CONV.tolist()}, got {first.tolist()}",
        )
    )
    convolved = conv(Tensor(S1_SIGNAL.T), Tensor(S1_KERNELS.T)).data.T
    second = (S1_ADJACENCY_MIX @ convolved)
    results.append(
        CheckResult(
            "order_sensitivity",
            "conv_then_mix",
            bool(np.array_equal(second, S1_CONV_THEN_MIX)),
            f"expected {S1_CONV_THEN_MIX.tolist()}, got {second.tolist()}",
        )
    )
    results.append(
        CheckResult(
            "order_sensitivity",
            "orders_differ",
            bool(not np.array_equal(first, second)),
            "the two compositions must not coincide",
        )
    )
    return results


# ---------------------------------------------------------------------------
# group 2: label smoothing reference values


def check_label_smoothing() -> list[CheckResult]:
    results = []
    got = smooth_label(3, 5, 0.5)
    independent = np.array([math.exp(-((j - 3) ** 2) / 0.5) for j in range(1, 6)])
    independent /= independent.sum()
    reference = np.array([2.64e-4, 0.11, 0.79, 0.11, 2.64e-4])
    close = (
        abs(got[0] - reference[0]) <= 1e-6
        and abs(got[4] - reference[4]) <= 1e-6
        and np.all(np.abs(got[1:4] - reference[1:4]) <= 5e-3)
    )
    results.append(
        CheckResult(
            "label_smoothing",
            "middle_class_reference",
            bool(close),
            f"smooth_label(3, 5, 0.5) = {got.tolist()}",
        )
    )
    results.append(
        CheckResult(
            "label_smoothing",
            "matches_direct_formula",
            bool(np.max(np.abs(got - independent)) < 1e-12),
            "renormalized Gaussian computed two ways",
        )
    )
    sums_ok = True
    symm_ok = True
    for k in (2, 3, 5, 7):
        for i in range(1, k + 1):
            p = smooth_label(i, k, 0.5)
            sums_ok &= abs(p.sum() - 1.0) < 1e-12
            symm_ok &= int(np.argmax(p)) == i - 1
    results.append(CheckResult("label_smoothing", "normalized_and_peaked", bool(sums_ok and symm_ok), "sum 1, argmax at the true class"))
    return results


# ---------------------------------------------------------------------------
# group 3: gradients


def _toy_config() -> ModelConfig:
    hierarchy = build_hierarchy(
        channels=("c1", "c2", "c3", "c4"),
        regions={"L": ("c1", "c2"), "R": ("c3", "c4")},
        region_edges=[("L", "R")],
    )
    return ModelConfig(
        hierarchy=hierarchy,
        variant="D",
        num_views=2,
        head_kernel=3,
        head_pool=2,
        sep_kernel=3,
        num_classes=3,
        dropout_rate=0.0,
        input_samples=16,
    )


def _op_cases(rng: np.random.Generator):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    x = rng.standard_normal((2, 8, 3))
    kernels = rng.standard_normal((3, 3))
    bias = rng.standard_normal(3)
    weight = rng.standard_normal((3, 5))
    bias5 = rng.standard_normal(5)
    mixer = rng.standard_normal(5)
    relu_in = rng.uniform(0.2, 1.0, size=(4, 4)) * rng.choice([-1.0, 1.0], size=(4, 4))
    wcols = rng.standard_normal(4)

    def conv_fn(p: Tensor):
        return T.t_sum(T.depthwise_time_conv(Tensor(x), p, Tensor(bias)))

    yield "matmul_lhs", (lambda p: T.t_sum(T.matmul(p, Tensor(b)))), Tensor(a)
    yield "matmul_rhs", (lambda p: T.t_sum(T.matmul(Tensor(a), p))), Tensor(b)
    yield "depthwise_input", (lambda p: T.t_sum(T.depthwise_time_conv(p, Tensor(kernels), Tensor(bias)))), Tensor(x)
    yield "depthwise_kernels", conv_fn, Tensor(kernels)
    yield "depthwise_bias", (lambda p: T.t_sum(T.depthwise_time_conv(Tensor(x), Tensor(kernels), p))), Tensor(bias)
    yield "pointwise", (lambda p: T.t_sum(T.pointwise_mix(Tensor(x), p, Tensor(bias5)))), Tensor(weight)
    yield "avg_pool", (lambda p: T.t_sum(T.avg_pool_time(p, 3))), Tensor(x)
    yield "softmax", (lambda p: T.t_sum(T.mul(T.softmax(p, axis=-1), Tensor(np.outer(np.ones(4), mixer))))), Tensor(rng.standard_normal((4, 5)))
    yield "elu", (lambda p: T.t_sum(T.mul(T.activation(p, "elu"), p))), Tensor(rng.standard_normal((4, 4)))
    yield "relu", (lambda p: T.t_sum(T.mul(T.activation(p, "relu"), p))), Tensor(relu_in)
    yield "softplus_log_exp", (lambda p: T.t_mean(T.t_log(T.add_const(T.t_exp(T.mul_const(p, 0.3)), 0.5)))), Tensor(rng.standard_normal((3, 3)))
    yield "structural", (
        lambda p: T.t_sum(
            T.concat_last([
                T.slice_last(T.pad_time(p, 1, 2), 0, 2),
                T.gather_last(T.pad_time(p, 2, 1), (2, 0)),
            ])
        )
    ), Tensor(rng.standard_normal((2, 6, 3)))
    series = rng.standard_normal((6, 4))
    yield "weighted_sum_cols", (lambda p: T.t_sum(T.weighted_sum_cols(p, Tensor(wcols)))), Tensor(series)
    yield "weighted_sum_weights", (lambda p: T.t_sum(T.weighted_sum_cols(Tensor(series), p))), Tensor(wcols)


def check_gradients(seeds: int = 10) -> list[CheckResult]:
    results = []
    worst_ops: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(900 + seed)
        for name, fn, probe in _op_cases(rng):
            err = grad_check(fn, probe, eps=1e-6)
            worst_ops[name] = max(worst_ops.get(name, 0.0), err)
    for name, err in worst_ops.items():
        results.append(
            CheckResult(
                "gradients",
                f"op_{name}",
                bool(err <= OP_TOLERANCE),
                f"max relative error {err:.3e} over {seeds} seeds (tolerance {OP_TOLERANCE})",
            )
        )

    cfg = _toy_config()
    worst_e2e = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(3000 + seed)
        model = build_model(cfg, rng)
        x = rng.standard_normal((4, cfg.input_samples, cfg.hierarchy.num_channels))
        y = rng.integers(1, cfg.num_classes + 1, size=4)

        for pname in model.params:
            original = model.params[pname]

            def fn(p: Tensor, _name=pname, _orig=original):
                model.params[_name] = p
                try:
                    return model.loss(model.forward(x, training=False), y)
                finally:
                    model.params[_name] = _orig

            err = grad_check(fn, original, eps=1e-5)
            worst_e2e = max(worst_e2e, err)
    results.append(
        CheckResult(
            "gradients",
            "end_to_end_toy_network",
            bool(worst_e2e <= END_TO_END_TOLERANCE),
            f"max relative error {worst_e2e:.3e} over {seeds} seeds, all parameters "
            f"(tolerance {END_TO_END_TOLERANCE})",
        )
    )
    return results


# ---------------------------------------------------------------------------
# group 4: Chebyshev basis against coefficient expansion

# Coefficients of T_k as a polynomial in ascending powers.
CHEB_COEFFS = (
    (1.0,),
    (0.0, 1.0),
    (-1.0, 0.0, 2.0),
    (0.0, -3.0, 0.0, 4.0),
    (1.0, 0.0, -8.0, 0.0, 8.0),
    (0.0, 5.0, 0.0, -20.0, 0.0, 16.0),
)


def _cheb_by_coefficients(m: np.ndarray, k: int) -> np.ndarray:
    total = np.zeros_like(m)
    power = np.eye(m.shape[0])
    for coeff in CHEB_COEFFS[k]:
        total = total + coeff * power
        power = power @ m
    return total


def check_chebyshev(num_graphs: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(71)
    worst = 0.0
    for _ in range(num_graphs):
        n = int(rng.integers(2, 9))
        adj = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                if rng.random() < 0.45:
                    adj[i, j] = adj[j, i] = 1.0
        lap = normalized_laplacian(adj)
        degree = int(rng.integers(0, 6))
        basis = chebyshev_basis(lap, degree)
        for k in range(degree + 1):
            expected = _cheb_by_coefficients(lap, k)
            worst = max(worst, float(np.max(np.abs(basis[k] - expected))))
    return [
        CheckResult(
            "chebyshev",
            "coefficient_expansion",
            bool(worst <= CHEB_TOLERANCE),
            f"max deviation {worst:.3e} over {num_graphs} random graphs (tolerance {CHEB_TOLERANCE})",
        )
    ]


# ---------------------------------------------------------------------------
# group 5: metrics against brute-force tallies


def _ref_confusion(rankings, truths, k):
    cm = [[0] * k for _ in range(k)]
    for ranking, truth in zip(rankings, truths):
        cm[truth - 1][ranking[0] - 1] += 1
    return cm


def _ref_macro_f1(cm):
    k = len(cm)
    f1s = []
    for i in range(k):
        tp = cm[i][i]
        row = sum(cm[i])
        col = sum(cm[r][i] for r in range(k))
        if row == 0 and col == 0:
            continue
        precision = tp / col if col > 0 else 0.0
        recall = tp / row if row > 0 else 0.0
        if precision + recall == 0.0:
            f1s.append(0.0)
        else:
            f1s.append(100.0 * 2.0 * precision * recall / (precision + recall))
    return sum(f1s) / len(f1s)


def _ref_tri_p(rankings, truths):
    near = sum(1 for ranking, truth in zip(rankings, truths) if abs(ranking[0] - truth) < 2)
    return 100.0 * near / len(truths)


def _ref_top2(rankings, truths):
    hits = sum(1 for ranking, truth in zip(rankings, truths) if truth in ranking[:2])
    return 100.0 * hits / len(truths)


def _ref_seq2hr(rankings, truths):
    hits = sum(
        1
        for ranking, truth in zip(rankings, truths)
        if truth in ranking[:2] and abs(ranking[0] - ranking[1]) == 1
    )
    return 100.0 * hits / len(truths)


def check_metrics(num_sets: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(55)
    exact = True
    bounded = True
    ordered = True
    detail = ""
    for idx in range(num_sets):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(3, 120))
        rankings = np.stack([rng.permutation(k) + 1 for _ in range(n)])
        truths = rng.integers(1, k + 1, size=n)
        cm = _confusion(rankings, truths, k)
        pairs = (
            (macro_f1(cm), _ref_macro_f1(cm.tolist())),
            (tri_p(cm), _ref_tri_p(rankings.tolist(), truths.tolist())),
            (top2_accuracy(rankings, truths, k), _ref_top2(rankings.tolist(), truths.tolist())),
            (seq2hr(rankings, truths, k), _ref_seq2hr(rankings.tolist(), truths.tolist())),
        )
        for got, want in pairs:
            if got != want:
                exact = False
                detail = f"set {idx}: got {got!r}, reference {want!r}"
            if not 0.0 <= got <= 100.0:
                bounded = False
        if seq2hr(rankings, truths, k) > top2_accuracy(rankings, truths, k):
            ordered = False
        ref_cm = np.asarray(_ref_confusion(rankings.tolist(), truths.tolist(), k))
        if not np.array_equal(cm, ref_cm):
            exact = False
            detail = f"set {idx}: confusion matrices differ"
    results = [
        CheckResult("metrics", "brute_force_equality", exact, detail or f"{num_sets} random sets match exactly"),
        CheckResult("metrics", "range_bounds", bounded, "all metric values within [0, 100]"),
        CheckResult("metrics", "seq2hr_le_top2", ordered, "Seq2HR never exceeds top-2 accuracy"),
    ]
    t_stat, p_value = paired_t_test([1.0, 3.0], [0.0, 0.0])
    results.append(
        CheckResult(
            "metrics",
            "paired_t_reference",
            bool(t_stat == 2.0 and abs(p_value - 0.2951672353008666) < 1e-12),
            f"differences (1, 3): t = {t_stat!r}, p = {p_value!r}",
        )
    )
    return results


# ---------------------------------------------------------------------------


def run_all() -> dict:
    started = time.monotonic()
    checks: list[CheckResult] = []
    checks.extend(check_order_sensitivity())
    checks.extend(check_label_smoothing())
    checks.extend(check_gradients())
    checks.extend(check_chebyshev())
    checks.extend(check_metrics())
    elapsed = time.monotonic() - started
    return {
        "passed": all(c.passed for c in checks),
        "elapsed_seconds": round(elapsed, 3),
        "checks": [c.to_dict() for c in checks],
    }
