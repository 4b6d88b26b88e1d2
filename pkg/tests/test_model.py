"""Model assembly: shapes, parameter counts, losses, rankings, checkpoints."""

import json

import numpy as np
import pytest

from histn.errors import (
    ContractError,
    DataError,
    DimensionError,
    LabelError,
    ValidationError,
)
from histn.graph import build_prior_graph, chebyshev_basis, normalized_laplacian
from histn.model import (
    GmmParams,
    ModelConfig,
    build_model,
    cheb_graph_conv,
    config_from_dict,
    config_to_dict,
    count_parameters,
    load_checkpoint,
    node_fusion,
    predict_ranking,
    save_checkpoint,
    variant_loss,
)
from histn.tensor import Tensor, backward


@pytest.fixture
def g0():
    return build_prior_graph("G0")


def build(toy_config, variant="D", seed=0, **overrides):
    from dataclasses import replace

    cfg = replace(toy_config, variant=variant, **overrides)
    return build_model(cfg, np.random.default_rng(seed))


class TestForwardShapes:
    def test_feature_width_g0(self, g0):
        assert g0.feature_width == 19

    @pytest.mark.parametrize("variant,width", [("A", 3), ("D", 3), ("B", 1)])
    def test_output_shape(self, toy_config, variant, width):
        m = build(toy_config, variant)
        x = np.random.default_rng(1).standard_normal((4, 16, 4))
        out = m.forward(x, training=False)
        assert out.shape == (4, width)

    def test_variant_c_returns_mixture(self, toy_config):
        m = build(toy_config, "C")
        x = np.random.default_rng(2).standard_normal((4, 16, 4))
        out = m.forward(x, training=False)
        assert isinstance(out, GmmParams)
        assert out.weights.shape == (4, 3)
        assert out.means.shape == (4, 3)
        assert out.stds.shape == (4, 3)
        np.testing.assert_allclose(out.weights.data.sum(axis=1), 1.0, atol=1e-12)
        assert (out.stds.data > 0).all()

    def test_wrong_input_shape_rejected(self, toy_config):
        m = build(toy_config)
        with pytest.raises(DimensionError):
            m.forward(np.zeros((4, 15, 4)), training=False)

    def test_forward_is_pure_in_eval_mode(self, toy_config):
        m = build(toy_config)
        x = np.random.default_rng(3).standard_normal((2, 16, 4))
        a = m.forward(x, training=False).data
        b = m.forward(x, training=False).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_only_in_training(self, toy_config):
        from dataclasses import replace

        cfg = replace(toy_config, dropout_rate=0.5)
        m = build_model(cfg, np.random.default_rng(4))
        x = np.random.default_rng(5).standard_normal((8, 16, 4))
        eval_out = m.forward(x, training=False).data
        train_out = m.forward(x, training=True, rng=np.random.default_rng(6)).data
        assert not np.array_equal(eval_out, train_out)

    def test_training_dropout_requires_rng(self, toy_config):
        from dataclasses import replace

        cfg = replace(toy_config, dropout_rate=0.5)
        m = build_model(cfg, np.random.default_rng(4))
        with pytest.raises(ContractError):
            m.forward(np.zeros((1, 16, 4)), training=True)


class TestParameterCounts:
    def test_g0_variant_counts(self, g0):
        counts = {}
        for v in "ABCD":
            cfg = ModelConfig(hierarchy=g0, variant=v)
            counts[v] = count_parameters(build_model(cfg, np.random.default_rng(0)))
        assert counts["D"] - counts["B"] == 80
        assert counts["C"] - counts["D"] == 200
        assert counts["A"] == counts["D"]
        assert 900 <= counts["D"] <= 1600

    def test_freeze_removes_group_from_trainables(self, toy_config):
        m = build(toy_config)
        full = count_parameters(m, trainable_only=True)
        m.freeze(("head",))
        frozen = count_parameters(m, trainable_only=True)
        head_size = sum(t.data.size for n, t in m.params.items() if n.startswith("head."))
        assert full - frozen == head_size
        assert all(not n.startswith("head.") for n in m.parameters(trainable_only=True))

    def test_freeze_unknown_group(self, toy_config):
        m = build(toy_config)
        with pytest.raises(ValidationError):
            m.freeze(("nonsense",))


class TestChebGraphConv:
    def test_degree_zero_scales_input(self):
        lt = normalized_laplacian(np.zeros((3, 3)))
        basis = [Tensor(b) for b in chebyshev_basis(lt, 0)]
        x = Tensor(np.random.default_rng(7).standard_normal((3, 4)))
        beta = Tensor(np.array([2.0]))
        out = cheb_graph_conv(x, basis, beta)
        np.testing.assert_allclose(out.data, 2.0 * x.data, atol=1e-12)

    def test_p2_first_order_swaps_and_negates(self):
        a = np.array([[0.0, 1.0], [1.0, 0.0]])
        basis = [Tensor(b) for b in chebyshev_basis(normalized_laplacian(a), 1)]
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        beta = Tensor(np.array([0.0, 1.0]))
        out = cheb_graph_conv(x, basis, beta).data
        np.testing.assert_allclose(out, [[-3.0, -4.0], [-1.0, -2.0]], atol=1e-8)

    def test_explicit_sum_oracle(self):
        rng = np.random.default_rng(8)
        a = (rng.random((4, 4)) < 0.5).astype(float)
        a = np.triu(a, 1)
        a = a + a.T
        lt = normalized_laplacian(a)
        mats = chebyshev_basis(lt, 2)
        basis = [Tensor(b) for b in mats]
        x = rng.standard_normal((4, 5))
        beta = rng.standard_normal(3)
        out = cheb_graph_conv(Tensor(x), basis, Tensor(beta)).data
        ref = sum(beta[k] * (mats[k] @ x) for k in range(3))
        np.testing.assert_allclose(out, ref, atol=1e-10)


class TestNodeFusion:
    def test_softmax_weighting_hand_example(self):
        t = np.arange(4.0).reshape(4, 1)
        children = [Tensor(t), Tensor(t * 2)]
        weight = Tensor(np.zeros((2, 2)))
        bias = Tensor(np.array([np.log(3.0), 0.0]))
        parent, wts = node_fusion(children, weight, bias)
        np.testing.assert_allclose(wts.data, [0.75, 0.25], atol=1e-12)
        np.testing.assert_allclose(
            parent.data, 0.75 * t + 0.25 * (t * 2), atol=1e-12
        )

    def test_zero_scores_give_mean(self):
        t = np.arange(4.0).reshape(4, 1)
        children = [Tensor(t), Tensor(t * 3)]
        parent, wts = node_fusion(children, Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))
        np.testing.assert_allclose(wts.data, [0.5, 0.5])
        np.testing.assert_allclose(parent.data, 2.0 * t)

    def test_single_child_passthrough(self):
        t = np.arange(4.0).reshape(4, 1)
        parent, wts = node_fusion([Tensor(t)], Tensor(np.zeros((1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_allclose(wts.data, [1.0])
        np.testing.assert_allclose(parent.data, t)


class TestVariantLoss:
    def test_a_perfect_prediction(self):
        logits = Tensor(np.array([[50.0, 0.0, 0.0, 0.0, 0.0]]))
        loss = variant_loss("A", logits, np.array([1]), 5)
        assert abs(loss.item()) <= 1e-6

    def test_d_uniform_prediction_is_log_k(self):
        out = Tensor(np.zeros((3, 5)))
        for target in (1, 3, 5):
            loss = variant_loss("D", out, np.array([target] * 3), 5)
            assert abs(loss.item() - np.log(5)) <= 1e-9

    def test_b_absolute_error(self):
        out = Tensor(np.array([[2.0], [4.0]]))
        loss = variant_loss("B", out, np.array([3, 3]), 5)
        assert loss.item() == 1.0

    def test_c_density_ordering(self):
        # a mixture peaked at 4 scores target 4 better than target 1
        g = GmmParams(
            weights=Tensor(np.array([[1.0, 0.0, 0.0, 0.0, 0.0]])),
            means=Tensor(np.array([[4.0, 3.0, 3.0, 3.0, 3.0]])),
            stds=Tensor(np.array([[0.5, 1.0, 1.0, 1.0, 1.0]])),
        )
        near = variant_loss("C", g, np.array([4]), 5).item()
        far = variant_loss("C", g, np.array([1]), 5).item()
        assert near < far

    def test_bad_target_rejected(self):
        out = Tensor(np.zeros((1, 5)))
        with pytest.raises(LabelError):
            variant_loss("A", out, np.array([0]), 5)
        with pytest.raises(LabelError):
            variant_loss("A", out, np.array([6]), 5)

    def test_losses_differentiable(self, toy_config):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((6, 16, 4))
        y = rng.integers(1, 4, size=6)
        for v in "ABCD":
            m = build(toy_config, v)
            loss = m.loss(m.forward(x, training=False), y)
            m.zero_grad()
            backward(loss)
            grads = [t.grad for t in m.parameters(trainable_only=True).values()]
            assert all(g is not None for g in grads)
            assert any(np.abs(g).max() > 0 for g in grads)


class TestPredictRanking:
    def test_b_distance_ranking(self):
        out = Tensor(np.array([[2.3]]))
        np.testing.assert_array_equal(predict_ranking("B", out, 5), [[2, 3, 1, 4, 5]])

    def test_b_clips_out_of_range(self):
        out = Tensor(np.array([[7.0]]))
        np.testing.assert_array_equal(predict_ranking("B", out, 5), [[5, 4, 3, 2, 1]])

    def test_a_orders_by_logit(self):
        out = Tensor(np.array([[0.1, 0.9, 0.3, 0.0, 0.0]]))
        np.testing.assert_array_equal(predict_ranking("A", out, 5), [[2, 3, 1, 4, 5]])

    def test_b_top2_always_consecutive(self):
        rng = np.random.default_rng(10)
        out = Tensor(rng.uniform(-1, 7, size=(50, 1)))
        rk = predict_ranking("B", out, 5)
        assert (np.abs(rk[:, 0] - rk[:, 1]) == 1).all()

    def test_c_follows_density_mass(self):
        g = GmmParams(
            weights=Tensor(np.array([[1.0, 0.0, 0.0, 0.0, 0.0]])),
            means=Tensor(np.array([[4.0, 3.0, 3.0, 3.0, 3.0]])),
            stds=Tensor(np.array([[0.1, 1.0, 1.0, 1.0, 1.0]])),
        )
        rk = predict_ranking("C", g, 5)
        assert rk[0, 0] == 4

    def test_rankings_are_permutations(self, toy_config):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((20, 16, 4))
        for v in "ABCD":
            m = build(toy_config, v)
            rk = m.predict_ranking(m.forward(x, training=False))
            assert rk.shape == (20, 3)
            for row in rk:
                assert sorted(row) == [1, 2, 3]


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, toy_config, tmp_path):
        m = build(toy_config, "C", seed=12)
        path = tmp_path / "ckpt.json"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert loaded.config.variant == "C"
        for name, tensor in m.params.items():
            np.testing.assert_array_equal(loaded.params[name].data, tensor.data)
        x = np.random.default_rng(13).standard_normal((2, 16, 4))
        a = m.forward(x, training=False)
        b = loaded.forward(x, training=False)
        np.testing.assert_array_equal(a.weights.data, b.weights.data)

    def test_checksum_detects_corruption(self, toy_config, tmp_path):
        m = build(toy_config)
        path = tmp_path / "ckpt.json"
        save_checkpoint(m, path)
        doc = json.loads(path.read_text())
        name = next(iter(doc["params"]))
        doc["params"][name]["values"][0] = 999.0
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="checksum"):
            load_checkpoint(path)

    def test_config_mismatch_reported(self, toy_config, tmp_path):
        from dataclasses import replace

        m = build(toy_config)
        path = tmp_path / "ckpt.json"
        save_checkpoint(m, path)
        other = replace(toy_config, variant="B")
        with pytest.raises(DataError, match="variant"):
            load_checkpoint(path, expected_config=other)

    def test_config_dict_roundtrip(self, toy_config):
        doc = config_to_dict(toy_config)
        back = config_from_dict(json.loads(json.dumps(doc)))
        assert back.variant == toy_config.variant
        assert back.num_views == toy_config.num_views
        assert back.hierarchy.feature_width == toy_config.hierarchy.feature_width
        assert back.hierarchy.channel.node_names == toy_config.hierarchy.channel.node_names


class TestDeterministicBuild:
    def test_same_seed_same_weights(self, toy_config):
        a = build(toy_config, seed=21)
        b = build(toy_config, seed=21)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self, toy_config):
        a = build(toy_config, seed=21)
        b = build(toy_config, seed=22)
        assert any(
            not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params
        )

    def test_bad_variant_rejected(self, toy_config):
        from dataclasses import replace

        with pytest.raises(ValidationError):
            build_model(replace(toy_config, variant="E"), np.random.default_rng(0))
