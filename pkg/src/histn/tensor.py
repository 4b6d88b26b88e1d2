"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set covers exactly what the network needs: matrix
products, per-channel time convolution (cross-correlation, no kernel
flip), pointwise channel mixing, average pooling, softmax, a handful of
elementwise maps, and structural ops (pad, slice, concat, gather) to
wire them together.

Semantics:

* every tensor is float64; values are treated as immutable once the
  tensor has participated in a recorded operation
* ``backward`` on a scalar fills ``grad`` on every ``requires_grad``
  tensor that fed into it; repeated calls accumulate until
  ``zero_grad``
* no implicit broadcasting beyond the patterns each op documents
* a recorded graph belongs to a single thread; nothing here is
  thread-safe by design
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError

Array = np.ndarray


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.data: Array = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], Iterable[tuple[Tensor, Array]]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"


def _node(values: Array, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    return out


def _check_finite(values: Array, op: str) -> Array:
    if not np.isfinite(values).all():
        raise NumericError(f"{op} produced non-finite values")
    return values


def backward(out: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``out``.

    Accumulates one Jacobian-vector product into ``grad`` of every
    reachable ``requires_grad`` tensor. Calling twice without
    ``zero_grad`` therefore doubles leaf gradients.
    """
    if out.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {out.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    local: dict[int, Array] = {id(out): np.ones_like(out.data)}
    for node in reversed(order):
        grad = local.pop(id(node), None)
        if grad is None:
            continue
        node.grad = grad if node.grad is None else node.grad + grad
        if node._backward_fn is None:
            continue
        for parent, contribution in node._backward_fn(grad):
            if not parent.requires_grad:
                continue
            held = local.get(id(parent))
            local[id(parent)] = contribution if held is None else held + contribution


# ---------------------------------------------------------------------------
# linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``a`` is (..., m, k) and ``b`` is (k, n)."""
    if a.data.ndim < 2 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape} do not agree")
    values = a.data @ b.data

    def bwd(g: Array):
        k, n = b.shape
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ((a, ga), (b, gb))

    return _node(values, (a, b), bwd, "matmul")


def _time_windows(a: Array, k: int) -> Array:
    """Read-only sliding-window view (..., T-k+1, k, C) along the time axis."""
    t_out = a.shape[-2] - k + 1
    shape = a.shape[:-2] + (t_out, k, a.shape[-1])
    strides = a.strides[:-2] + (a.strides[-2], a.strides[-2], a.strides[-1])
    return np.lib.stride_tricks.as_strided(a, shape, strides, writeable=False)


def depthwise_time_conv(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation along time, one kernel per channel.

    ``x`` is (..., T, C), ``kernels`` is (k, C); output is (..., T-k+1, C)
    with ``out[..., t, c] = sum_j x[..., t+j, c] * kernels[j, c]``. The
    kernel is not flipped. ``bias`` (C,) is added per channel if given.
    """
    if kernels.data.ndim != 2:
        raise DimensionError(f"kernels must be 2-d (k, C), got {kernels.shape}")
    if x.data.ndim < 2:
        raise DimensionError(f"input must be at least 2-d (T, C), got {x.shape}")
    k, kc = kernels.shape
    t, c = x.shape[-2], x.shape[-1]
    if k < 1:
        raise ParameterError(f"kernel width must be >= 1, got {k}")
    if kc != c:
        raise DimensionError(f"kernel channels {kc} != input channels {c}")
    if k > t:
        raise DimensionError(f"kernel width {k} exceeds time length {t}")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"bias shape {bias.shape} != ({c},)")
    t_out = t - k + 1
    values = np.einsum("...tjc,jc->...tc", _time_windows(x.data, k), kernels.data)
    if bias is not None:
        values = values + bias.data

    def bwd(g: Array):
        # gx is the full correlation of g with the flipped kernel: pad g by
        # k-1 on both sides of time, then a valid pass recovers length T.
        padded = np.zeros(g.shape[:-2] + (t_out + 2 * (k - 1), c), dtype=np.float64)
        padded[..., k - 1 : k - 1 + t_out, :] = g
        gx = np.einsum("...tjc,jc->...tc", _time_windows(padded, k), kernels.data[::-1])
        flat_x = np.ascontiguousarray(x.data).reshape(-1, t, c)
        gk = np.einsum("nsjc,nsc->jc", _time_windows(flat_x, k), g.reshape(-1, t_out, c))
        pairs = [(x, gx), (kernels, gk)]
        if bias is not None:
            pairs.append((bias, g.sum(axis=tuple(range(g.ndim - 1)))))
        return pairs

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _node(values, parents, bwd, "depthwise_time_conv")


def pointwise_mix(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Mix channels at each time step: (..., T, Cin) @ (Cin, Cout) + bias."""
    if weight.data.ndim != 2 or x.data.ndim < 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"pointwise_mix shapes {x.shape} x {weight.shape} do not agree")
    cin, cout = weight.shape
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    values = x.data @ weight.data
    if bias is not None:
        values = values + bias.data

    def bwd(g: Array):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, cin).T @ g.reshape(-1, cout)
        pairs = [(x, gx), (weight, gw)]
        if bias is not None:
            pairs.append((bias, g.sum(axis=tuple(range(g.ndim - 1)))))
        return pairs

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(values, parents, bwd, "pointwise_mix")


def avg_pool_time(x: Tensor, window: int) -> Tensor:
    """Non-overlapping mean pooling along time; a trailing remainder is dropped."""
    if not isinstance(window, int) or window < 1:
        raise ParameterError(f"pool window must be a positive integer, got {window!r}")
    if x.data.ndim < 2:
        raise DimensionError(f"input must be at least 2-d (T, C), got {x.shape}")
    t, c = x.shape[-2], x.shape[-1]
    t_out = t // window
    if t_out < 1:
        raise DimensionError(f"pool window {window} exceeds time length {t}")
    lead = x.shape[:-2]
    trimmed = x.data[..., : t_out * window, :]
    values = trimmed.reshape(lead + (t_out, window, c)).mean(axis=-2)

    def bwd(g: Array):
        gx = np.zeros_like(x.data)
        gx[..., : t_out * window, :] = np.repeat(g, window, axis=-2) / window
        return ((x, gx),)

    return _node(values, (x,), bwd, "avg_pool_time")


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; NaN input is an error."""
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)

    def bwd(g: Array):
        inner = (g * values).sum(axis=axis, keepdims=True)
        return ((x, values * (g - inner)),)

    return _node(values, (x,), bwd, "softmax")


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply ``elu``, ``relu``, or ``identity`` elementwise."""
    if kind == "identity":
        return x
    if kind == "relu":
        values = np.maximum(x.data, 0.0)

        def bwd_relu(g: Array):
            return ((x, g * (x.data > 0)),)

        return _node(values, (x,), bwd_relu, "relu")
    if kind == "elu":
        positive = x.data > 0
        values = np.where(positive, x.data, np.expm1(np.minimum(x.data, 0.0)))
        deriv = np.where(positive, 1.0, values + 1.0)

        def bwd_elu(g: Array):
            return ((x, g * deriv),)

        return _node(values, (x,), bwd_elu, "elu")
    raise ParameterError(f"unknown activation {kind!r}")


def softplus(x: Tensor) -> Tensor:
    values = np.logaddexp(0.0, x.data)

    def bwd(g: Array):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return ((x, g * sig),)

    return _node(values, (x,), bwd, "softplus")


# ---------------------------------------------------------------------------
# elementwise arithmetic (strict same-shape unless documented)


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: ((a, g), (b, -g)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "div")
    values = _check_finite(a.data / b.data, "div")

    def bwd(g: Array):
        return ((a, g / b.data), (b, -g * a.data / (b.data * b.data)))

    return _node(values, (a, b), bwd, "div")


def add_const(x: Tensor, c: float) -> Tensor:
    return _node(x.data + c, (x,), lambda g: ((x, g),), "add_const")


def mul_const(x: Tensor, c: float) -> Tensor:
    return _node(x.data * c, (x,), lambda g: ((x, g * c),), "mul_const")


def neg(x: Tensor) -> Tensor:
    return mul_const(x, -1.0)


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the scalar tensor ``s``."""
    if s.data.size != 1:
        raise DimensionError(f"scale factor must be scalar, got shape {s.shape}")
    sval = s.data.reshape(())
    values = x.data * sval

    def bwd(g: Array):
        return ((x, g * sval), (s, np.asarray((g * x.data).sum()).reshape(s.shape)))

    return _node(values, (x, s), bwd, "scale")


def shift(x: Tensor, s: Tensor) -> Tensor:
    """Add the scalar tensor ``s`` to every element of ``x``."""
    if s.data.size != 1:
        raise DimensionError(f"shift amount must be scalar, got shape {s.shape}")
    values = x.data + s.data.reshape(())

    def bwd(g: Array):
        return ((x, g), (s, np.asarray(g.sum()).reshape(s.shape)))

    return _node(values, (x, s), bwd, "shift")


def t_exp(x: Tensor) -> Tensor:
    values = _check_finite(np.exp(x.data), "exp")
    return _node(values, (x,), lambda g: ((x, g * values),), "exp")


def t_log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log input must be strictly positive")
    return _node(np.log(x.data), (x,), lambda g: ((x, g / x.data),), "log")


def t_abs(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), (x,), lambda g: ((x, g * np.sign(x.data)),), "abs")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where no clipping happened."""
    if lo is None and hi is None:
        raise ParameterError("clamp needs at least one bound")
    values = np.clip(x.data, lo, hi)
    passes = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        passes &= x.data >= lo
    if hi is not None:
        passes &= x.data <= hi

    def bwd(g: Array):
        return ((x, g * passes),)

    return _node(values, (x,), bwd, "clamp")


# ---------------------------------------------------------------------------
# reductions


def t_sum(x: Tensor) -> Tensor:
    values = np.asarray(x.data.sum())
    return _node(values, (x,), lambda g: ((x, np.broadcast_to(g, x.shape).copy()),), "sum")


def t_mean(x: Tensor) -> Tensor:
    n = x.data.size
    values = np.asarray(x.data.mean())
    return _node(values, (x,), lambda g: ((x, np.broadcast_to(g / n, x.shape).copy()),), "mean")


def sum_axis(x: Tensor, axis: int) -> Tensor:
    values = x.data.sum(axis=axis)

    def bwd(g: Array):
        return ((x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()),)

    return _node(values, (x,), bwd, "sum_axis")


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    values = x.data.mean(axis=axis)

    def bwd(g: Array):
        return ((x, np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy()),)

    return _node(values, (x,), bwd, "mean_axis")


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, new_shape: tuple[int, ...]) -> Tensor:
    values = x.data.reshape(new_shape)
    return _node(values, (x,), lambda g: ((x, g.reshape(x.shape)),), "reshape")


def pad_time(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad along the time axis (second to last)."""
    if before < 0 or after < 0:
        raise ParameterError(f"pad amounts must be >= 0, got ({before}, {after})")
    if x.data.ndim < 2:
        raise DimensionError(f"input must be at least 2-d (T, C), got {x.shape}")
    pad = [(0, 0)] * x.data.ndim
    pad[-2] = (before, after)
    values = np.pad(x.data, pad)
    t = x.shape[-2]

    def bwd(g: Array):
        return ((x, g[..., before : before + t, :]),)

    return _node(values, (x,), bwd, "pad_time")


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_last needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat_last leading shapes differ: {lead} vs {p.shape[:-1]}")
    values = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def bwd(g: Array):
        pairs = []
        start = 0
        for p, w in zip(parts, widths):
            pairs.append((p, g[..., start : start + w]))
            start += w
        return pairs

    return _node(values, tuple(parts), bwd, "concat_last")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]
    if not (0 <= start < stop <= width):
        raise DimensionError(f"slice [{start}:{stop}] invalid for width {width}")
    values = x.data[..., start:stop]

    def bwd(g: Array):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return ((x, gx),)

    return _node(values, (x,), bwd, "slice_last")


def gather_last(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select columns of the last axis in the given order."""
    width = x.shape[-1]
    idx = tuple(int(i) for i in indices)
    if not idx:
        raise ContractError("gather_last needs at least one index")
    for i in idx:
        if not 0 <= i < width:
            raise DimensionError(f"index {i} out of range for width {width}")
    values = x.data[..., list(idx)]

    def bwd(g: Array):
        gx = np.zeros_like(x.data)
        for pos, col in enumerate(idx):
            gx[..., col] += g[..., pos]
        return ((x, gx),)

    return _node(values, (x,), bwd, "gather_last")


def index_scalar(x: Tensor, i: int) -> Tensor:
    """Pick element ``i`` of a vector as a scalar tensor."""
    if x.data.ndim != 1:
        raise DimensionError(f"index_scalar needs a vector, got shape {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise DimensionError(f"index {i} out of range for length {x.shape[0]}")
    values = np.asarray(x.data[i])

    def bwd(g: Array):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return ((x, gx),)

    return _node(values, (x,), bwd, "index_scalar")


def broadcast_col(x: Tensor, width: int) -> Tensor:
    """Repeat a (k, 1) column across ``width`` columns."""
    if x.data.ndim != 2 or x.shape[1] != 1:
        raise DimensionError(f"broadcast_col needs shape (k, 1), got {x.shape}")
    if width < 1:
        raise ParameterError(f"width must be >= 1, got {width}")
    values = np.repeat(x.data, width, axis=1)

    def bwd(g: Array):
        return ((x, g.sum(axis=1, keepdims=True)),)

    return _node(values, (x,), bwd, "broadcast_col")


def weighted_sum_cols(x: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of the last axis: (..., T, N) with (..., N) -> (..., T, 1)."""
    if x.data.ndim < 2 or weights.shape != x.shape[:-2] + (x.shape[-1],):
        raise DimensionError(f"weighted_sum_cols shapes {x.shape} and {weights.shape} do not agree")
    values = np.einsum("...tn,...n->...t", x.data, weights.data)[..., None]

    def bwd(g: Array):
        gq = g[..., 0]
        gx = gq[..., None] * weights.data[..., None, :]
        gw = np.einsum("...tn,...t->...n", x.data, gq)
        return ((x, gx), (weights, gw))

    return _node(values, (x, weights), bwd, "weighted_sum_cols")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; scales kept entries by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: ((x, g * mask),), "dropout")


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Compare analytic gradients of ``fn`` at ``x`` against central differences.

    Returns the maximum elementwise relative error
    ``|a - n| / max(1, |a|, |n|)``. ``fn`` must map a tensor to a scalar
    tensor and be deterministic.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = fn(probe)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued fn, got shape {out.shape}")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.ravel()
    flat = x.data.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = fn(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - eps
        lo = fn(Tensor(bumped.reshape(x.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
