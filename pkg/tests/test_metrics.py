"""Label encodings, ranking metrics, and the paired t-test.

Reference values come from direct hand computation or from scipy
(test-only dependency), never from the implementation under test.
"""

import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from histn.errors import ContractError, LabelError, MetricError, ParameterError
from histn.metrics import (
    EvalReport,
    confusion_matrix,
    macro_f1,
    one_hot,
    paired_t_test,
    per_class_f1,
    seq2hr,
    smooth_label,
    top2_accuracy,
    tri_p,
)


def rankings_from_top(tops, k=5):
    """Build full rankings whose first column is the given top choice."""
    out = []
    for t in tops:
        rest = [c for c in range(1, k + 1) if c != t]
        out.append([t] + rest)
    return np.array(out)


class TestSmoothLabel:
    def test_middle_class_reference_vector(self):
        v = smooth_label(3, 5, s=0.5)
        # direct Gaussian formula, renormalized over classes 1..5
        raw = np.array([math.exp(-((i - 3) ** 2) / (2 * 0.25)) for i in range(1, 6)])
        np.testing.assert_allclose(v, raw / raw.sum(), atol=1e-12)
        assert abs(v[2] - 0.79) <= 5e-3
        assert abs(v[1] - 0.11) <= 5e-3 and abs(v[3] - 0.11) <= 5e-3
        assert abs(v[0] - 2.64e-4) <= 1e-6 and abs(v[4] - 2.64e-4) <= 1e-6

    def test_edge_class_renormalizes_truncated_tail(self):
        v = smooth_label(1, 5, s=0.5)
        assert abs(v[0] - 0.8805) <= 5e-4
        assert abs(v[1] - 0.1192) <= 5e-4
        assert abs(v[2] - 2.95e-4) <= 1e-5

    @pytest.mark.parametrize("k", [2, 3, 5, 7])
    @pytest.mark.parametrize("i", [1, 2])
    def test_normalized_and_peaked(self, k, i):
        if i > k:
            pytest.skip("class outside range")
        v = smooth_label(i, k, s=0.5)
        assert abs(v.sum() - 1.0) <= 1e-12
        assert v.argmax() == i - 1

    def test_out_of_range_class(self):
        with pytest.raises(LabelError):
            smooth_label(0, 5)
        with pytest.raises(LabelError):
            smooth_label(6, 5)

    def test_nonpositive_width(self):
        with pytest.raises(ParameterError):
            smooth_label(1, 5, s=0.0)


class TestOneHot:
    def test_basic(self):
        np.testing.assert_allclose(one_hot(2, 4), [0, 1, 0, 0])

    def test_out_of_range(self):
        with pytest.raises(LabelError):
            one_hot(5, 4)


class TestConfusionMatrix:
    def test_tally_oracle(self):
        rng = np.random.default_rng(7)
        truths = rng.integers(1, 6, size=50)
        tops = rng.integers(1, 6, size=50)
        cm = confusion_matrix(rankings_from_top(tops), truths, 5)
        ref = np.zeros((5, 5), dtype=int)
        for t, p in zip(truths, tops):
            ref[t - 1, p - 1] += 1
        np.testing.assert_array_equal(cm, ref)
        assert cm.sum() == 50


class TestMacroF1:
    def test_hand_computed_two_class(self):
        # cm = [[3,1],[2,4]]: P1=3/5, R1=3/4, P2=4/5, R2=4/6
        rankings = rankings_from_top([1] * 4 + [2] * 6, k=2)
        truths = np.array([1, 1, 1, 2, 1, 2, 2, 2, 2, 2])
        # order the samples so the confusion matrix is exactly [[3,1],[2,4]]
        tops = [1, 1, 1, 2, 1, 1, 2, 2, 2, 2]
        truths = np.array([1, 1, 1, 1, 2, 2, 2, 2, 2, 2])
        cm = confusion_matrix(rankings_from_top(tops, k=2), truths, 2)
        np.testing.assert_array_equal(cm, [[3, 1], [2, 4]])
        f11 = 2 * (3 / 5) * (3 / 4) / (3 / 5 + 3 / 4)
        f12 = 2 * (4 / 5) * (4 / 6) / (4 / 5 + 4 / 6)
        assert abs(macro_f1(cm) - 100 * (f11 + f12) / 2) <= 1e-12

    def test_absent_class_skipped(self):
        cm = np.array([[5, 0, 0], [0, 5, 0], [0, 0, 0]])
        assert macro_f1(cm) == 100.0
        scores, present = per_class_f1(cm)
        assert list(present) == [True, True, False]

    def test_undefined_precision_counts_as_zero(self):
        # class 2 present in truth but never predicted correctly
        cm = np.array([[4, 0], [2, 0]])
        scores, present = per_class_f1(cm)
        assert list(present) == [True, True]
        assert scores[1] == 0.0


class TestTriP:
    def test_direct_formula(self):
        # band mass (2+1)+(2+0)+(0+1) over 10 samples
        tops = [1, 1, 2, 2, 1, 3, 3, 1, 3, 2]
        truths = [1, 1, 1, 2, 2, 2, 3, 3, 1, 3]
        cm = confusion_matrix(rankings_from_top(tops, k=3), np.array(truths), 3)
        np.testing.assert_array_equal(cm, [[2, 1, 1], [1, 1, 1], [1, 1, 1]])
        band = np.trace(cm) + np.trace(cm, 1) + np.trace(cm, -1)
        assert tri_p(cm) == 100.0 * band / 10

    def test_all_diagonal(self):
        r = rankings_from_top([1, 2, 3], k=3)
        cm = confusion_matrix(r, np.array([1, 2, 3]), 3)
        assert tri_p(cm) == 100.0


class TestSeq2HR:
    def test_consecutive_and_hit_required(self):
        rankings = np.array(
            [
                [2, 3, 1, 4, 5],  # top-2 {2,3} consecutive, truth 3 -> hit
                [2, 4, 1, 3, 5],  # top-2 {2,4} not consecutive -> miss
                [2, 3, 1, 4, 5],  # truth 5 not in top-2 -> miss
            ]
        )
        truths = np.array([3, 2, 5])
        assert seq2hr(rankings, truths, 5) == pytest.approx(100.0 / 3)

    def test_equals_top2_when_always_consecutive(self):
        # rankings shaped like distance-ranking output: top-2 always adjacent
        rng = np.random.default_rng(11)
        truths = rng.integers(1, 6, size=40)
        rankings = []
        for _ in range(40):
            first = int(rng.integers(1, 6))
            second = first + 1 if first < 5 else first - 1
            rest = [c for c in range(1, 6) if c not in (first, second)]
            rankings.append([first, second] + rest)
        rankings = np.array(rankings)
        assert seq2hr(rankings, truths, 5) == top2_accuracy(rankings, truths, 5)

    def test_invalid_ranking_rejected(self):
        with pytest.raises(ContractError):
            seq2hr(np.array([[1, 1, 2, 3, 4]]), np.array([1]), 5)


class TestPairedT:
    def test_matches_scipy_on_random_pairs(self):
        rng = np.random.default_rng(23)
        for _ in range(25):
            n = int(rng.integers(3, 12))
            a = rng.standard_normal(n)
            b = a + rng.standard_normal(n) * 0.7 + 0.3
            t, p = paired_t_test(a, b)
            ref = scipy.stats.ttest_rel(a, b)
            assert abs(t - ref.statistic) <= 1e-10
            assert abs(p - ref.pvalue) <= 1e-12

    def test_two_sample_reference(self):
        # diffs {1, 3}: mean 2, sd sqrt(2), t = 2 / (sqrt(2)/sqrt(2)) = 2
        t, p = paired_t_test([2.0, 4.0], [1.0, 1.0])
        assert abs(t - 2.0) <= 1e-12
        assert abs(p - 0.29516723530086636) <= 1e-12

    def test_perturbed_pair_hand_formula(self):
        a = np.array([1.0, 2.0, 3.0, 4.0])
        b = a.copy()
        b[2] += 0.8
        t, _ = paired_t_test(b, a)
        d = b - a
        ref = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
        assert abs(t - ref) <= 1e-12

    def test_zero_variance_rejected(self):
        with pytest.raises(MetricError):
            paired_t_test([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            paired_t_test([1.0, 2.0], [1.0])


class TestEvalReport:
    def test_from_rankings_consistent_fields(self):
        rng = np.random.default_rng(31)
        truths = rng.integers(1, 6, size=60)
        tops = rng.integers(1, 6, size=60)
        rankings = rankings_from_top(tops)
        rep = EvalReport.from_rankings(rankings, truths, 5)
        assert rep.num_samples == 60
        assert rep.f1_macro == macro_f1(confusion_matrix(rankings, truths, 5))
        assert rep.tri_p == tri_p(confusion_matrix(rankings, truths, 5))
        assert rep.seq2hr == seq2hr(rankings, truths, 5)
        assert rep.top2_accuracy == top2_accuracy(rankings, truths, 5)
        d = rep.to_dict()
        assert set(d) >= {"f1_macro", "tri_p", "seq2hr", "top2_accuracy", "confusion"}


# ---------------------------------------------------------------------------
# structural properties


@given(
    st.lists(st.integers(1, 5), min_size=5, max_size=40),
    st.integers(0, 2**31 - 1),
)
@settings(max_examples=60, deadline=None)
def test_metric_inequalities(truth_list, seed):
    rng = np.random.default_rng(seed)
    truths = np.array(truth_list)
    rankings = np.array([rng.permutation(5) + 1 for _ in truths])
    s = seq2hr(rankings, truths, 5)
    t2 = top2_accuracy(rankings, truths, 5)
    top1 = 100.0 * (rankings[:, 0] == truths).mean()
    assert 0.0 <= s <= t2 <= 100.0
    assert tri_p(confusion_matrix(rankings, truths, 5)) >= top1 - 1e-9
