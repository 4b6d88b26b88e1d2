"""The self-check suite must catch real defects, not just bless the code."""

import numpy as np

from histn import tensor as T
from histn.tensor import Tensor
from histn.verify import (
    check_chebyshev,
    check_label_smoothing,
    check_metrics,
    check_order_sensitivity,
)


def broken_conv(x, kernels, bias=None):
    # flips the kernel, turning correlation into convolution
    flipped = Tensor(np.ascontiguousarray(kernels.data[::-1]))
    return T.depthwise_time_conv(x, flipped, bias)


class TestSelfChecks:
    def test_order_sensitivity_passes_on_real_op(self):
        results = check_order_sensitivity()
        assert [r.name for r in results] == [
            "mix_then_conv", "conv_then_mix", "orders_differ",
        ]
        assert all(r.passed for r in results)

    def test_order_sensitivity_catches_flipped_kernel(self):
        results = check_order_sensitivity(conv_fn=broken_conv)
        assert not all(r.passed for r in results)

    def test_label_smoothing_group(self):
        results = check_label_smoothing()
        assert all(r.passed for r in results)

    def test_chebyshev_group(self):
        results = check_chebyshev(num_graphs=5)
        assert all(r.passed for r in results)

    def test_metrics_group(self):
        results = check_metrics(num_sets=20)
        assert all(r.passed for r in results)

    def test_results_serialize(self):
        result = check_label_smoothing()[0]
        doc = result.to_dict()
        assert set(doc) == {"group", "name", "passed", "detail"}
