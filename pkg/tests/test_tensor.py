"""Tensor core: forward oracles, gradient checks, and error contracts.

Every differentiable op is checked against an independent reference
(a direct loop, a numpy formula, or central finite differences).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import histn.tensor as T
from histn.errors import ContractError, DimensionError, NumericError, ParameterError
from histn.tensor import Tensor, backward, grad_check


GRAD_TOL = 1e-4


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# forward oracles


class TestMatmul:
    def test_triple_loop_oracle(self):
        a, b = rand((3, 3), 1), rand((3, 3), 2)
        out = T.matmul(Tensor(a), Tensor(b)).data
        ref = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_batched_lead_dims(self):
        a, b = rand((2, 4, 3), 3), rand((3, 5), 4)
        out = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, a @ b, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(rand((2, 3))), Tensor(rand((4, 2))))


class TestDepthwiseTimeConv:
    def test_sliding_window_oracle(self):
        x, w = rand((8, 3), 5), rand((3, 3), 6)
        out = T.depthwise_time_conv(Tensor(x), Tensor(w)).data
        assert out.shape == (6, 3)
        for t in range(6):
            for c in range(3):
                ref = sum(x[t + j, c] * w[j, c] for j in range(3))
                assert abs(out[t, c] - ref) <= 1e-12

    def test_correlation_not_convolution(self):
        # An asymmetric kernel distinguishes the two orientations.
        x = Tensor(np.arange(5.0).reshape(5, 1))
        w = Tensor(np.array([[1.0], [0.0], [0.0]]))
        out = T.depthwise_time_conv(x, w).data
        np.testing.assert_allclose(out[:, 0], [0.0, 1.0, 2.0])

    def test_bias_added_per_channel(self):
        x, w = rand((6, 2), 7), rand((2, 2), 8)
        b = np.array([1.0, -2.0])
        plain = T.depthwise_time_conv(Tensor(x), Tensor(w)).data
        biased = T.depthwise_time_conv(Tensor(x), Tensor(w), Tensor(b)).data
        np.testing.assert_allclose(biased, plain + b, atol=1e-12)

    def test_kernel_wider_than_time(self):
        with pytest.raises(DimensionError):
            T.depthwise_time_conv(Tensor(rand((2, 3))), Tensor(rand((4, 3))))


class TestPointwiseMix:
    def test_matmul_oracle(self):
        x, w = rand((4, 3), 9), rand((3, 2), 10)
        out = T.pointwise_mix(Tensor(x), Tensor(w)).data
        for t in range(4):
            np.testing.assert_allclose(out[t], x[t] @ w, atol=1e-12)


class TestAvgPool:
    def test_window_two_drops_remainder(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0, 5.0]).reshape(5, 1))
        out = T.avg_pool_time(x, 2).data
        np.testing.assert_allclose(out[:, 0], [1.5, 3.5])

    def test_window_exceeds_time(self):
        with pytest.raises(DimensionError):
            T.avg_pool_time(Tensor(rand((3, 2))), 4)


class TestSoftmax:
    def test_direct_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        out = T.softmax(Tensor(x)).data
        ref = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_large_values_stable(self):
        out = T.softmax(Tensor(np.array([1000.0, 1000.0]))).data
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.softmax(Tensor(np.array([np.nan, 1.0])))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, xs):
        out = T.softmax(Tensor(np.array(xs))).data
        assert abs(out.sum() - 1.0) <= 1e-12
        assert (out >= 0).all()


class TestElementwise:
    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(rand((2, 3))), Tensor(rand((3, 2))))

    def test_div_by_zero(self):
        with pytest.raises(NumericError):
            T.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))

    def test_log_nonpositive(self):
        with pytest.raises(NumericError):
            T.t_log(Tensor(np.array([1.0, 0.0])))

    def test_elu_matches_formula(self):
        x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
        out = T.activation(Tensor(x), "elu").data
        ref = np.where(x > 0, x, np.exp(np.minimum(x, 0)) - 1.0)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_clamp_values(self):
        x = np.array([-2.0, 0.5, 3.0])
        out = T.clamp(Tensor(x), 0.0, 1.0).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


class TestStructuralOps:
    def test_pad_concat_slice_gather_roundtrip(self):
        x = rand((3, 4), 11)
        padded = T.pad_time(Tensor(x), 1, 2).data
        assert padded.shape == (6, 4)
        np.testing.assert_allclose(padded[1:4], x)
        assert (padded[0] == 0).all() and (padded[4:] == 0).all()

        both = T.concat_last([Tensor(x), Tensor(x)]).data
        assert both.shape == (3, 8)
        back = T.slice_last(Tensor(both), 4, 8).data
        np.testing.assert_allclose(back, x)

        picked = T.gather_last(Tensor(x), (2, 0)).data
        np.testing.assert_allclose(picked[:, 0], x[:, 2])
        np.testing.assert_allclose(picked[:, 1], x[:, 0])

    def test_weighted_sum_cols(self):
        x = rand((5, 3), 12)
        w = np.array([0.2, 0.3, 0.5])
        out = T.weighted_sum_cols(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(out[:, 0], x @ w, atol=1e-12)

    def test_broadcast_col(self):
        col = rand((4, 1), 13)
        out = T.broadcast_col(Tensor(col), 3).data
        assert out.shape == (4, 3)
        for c in range(3):
            np.testing.assert_allclose(out[:, c], col[:, 0])


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tensor(rand((4, 4), 14), requires_grad=True)
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_inverted_scaling(self):
        x = np.ones((1000, 4))
        out = T.dropout(Tensor(x), 0.25, np.random.default_rng(5)).data
        kept = out != 0
        np.testing.assert_allclose(out[kept], 1.0 / 0.75)
        # keep fraction concentrates near 1 - rate
        assert abs(kept.mean() - 0.75) < 0.05

    def test_bad_rate(self):
        with pytest.raises(ParameterError):
            T.dropout(Tensor(np.ones(3)), 1.0, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# backward semantics


class TestBackward:
    def test_grad_is_column_sums(self):
        # out = sum(A @ x) gives d out / d x_kj = sum_i A[i, k].
        a = rand((3, 3), 15)
        x = Tensor(rand((3, 2), 16), requires_grad=True)
        backward(T.t_sum(T.matmul(Tensor(a), x)))
        expected = np.repeat(a.sum(axis=0)[:, None], 2, axis=1)
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)

    def test_backward_accumulates_across_calls(self):
        x = Tensor(rand((3,), 17), requires_grad=True)
        out = T.t_sum(T.mul(x, x))
        backward(out)
        once = x.grad.copy()
        backward(out)
        np.testing.assert_allclose(x.grad, 2 * once, atol=1e-12)

    def test_shared_subexpression_counted_twice(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.mul(x, x)  # x used twice -> dy/dx = 2x
        backward(T.t_sum(y))
        np.testing.assert_allclose(x.grad, [4.0])

    def test_non_scalar_backward_rejected(self):
        x = Tensor(rand((2, 2), 18), requires_grad=True)
        with pytest.raises(ContractError):
            backward(T.mul(x, x))

    def test_clamp_blocks_gradient_where_clipped(self):
        x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
        backward(T.t_sum(T.clamp(x, 0.0, 1.0)))
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# finite-difference gradient checks


class TestGradCheck:
    def test_softmax_then_dot(self):
        w = rand((5,), 19)
        fn = lambda t: T.t_sum(T.mul(T.softmax(t), Tensor(w)))
        err = grad_check(fn, Tensor(rand((5,), 20), requires_grad=True))
        assert err <= GRAD_TOL

    def test_conv_composite(self):
        kernels = Tensor(rand((3, 2), 21))
        fn = lambda t: T.t_mean(T.activation(T.depthwise_time_conv(t, kernels), "elu"))
        err = grad_check(fn, Tensor(rand((9, 2), 22), requires_grad=True))
        assert err <= GRAD_TOL

    def test_kernel_gradient(self):
        x = Tensor(rand((9, 2), 23))
        fn = lambda t: T.t_mean(T.depthwise_time_conv(x, t))
        err = grad_check(fn, Tensor(rand((3, 2), 24), requires_grad=True))
        assert err <= GRAD_TOL

    @pytest.mark.parametrize("seed", range(5))
    def test_composite_chain(self, seed):
        # pool(conv) -> mix -> softmax -> weighted mean, all in one graph
        rng = np.random.default_rng(100 + seed)
        kernels = Tensor(rng.standard_normal((3, 4)))
        weight = Tensor(rng.standard_normal((4, 3)))

        def fn(t):
            h = T.depthwise_time_conv(T.pad_time(t, 1, 1), kernels)
            h = T.avg_pool_time(T.activation(h, "elu"), 2)
            h = T.pointwise_mix(h, weight)
            return T.t_mean(T.softmax(h, axis=-1))

        x = Tensor(rng.standard_normal((2, 8, 4)), requires_grad=True)
        assert grad_check(fn, x) <= GRAD_TOL
