import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from earlycrop import autodiff as ad
from earlycrop.criteria import InfeasibleRatioError, ScoreVector
from earlycrop.models import Layer, Model, cnn, loss_builder, mlp, predict
from earlycrop.structured import (
    NodeMask,
    StructuredUnsupportedError,
    apply_node_mask,
    build_node_mask,
    compact,
    gate_keys,
    gate_scores,
    inject_gates,
    induced_weight_sparsity,
)


def random_node_mask(model, rng, p=0.5):
    layers = tuple(range(len(model.layers) - 1))
    keep = []
    for i in layers:
        k = rng.uniform(size=model.layers[i].n_out) > p
        k[rng.integers(model.layers[i].n_out)] = True
        keep.append(k)
    return NodeMask(layers, tuple(keep))


class TestInjectGates:
    def test_outputs_unchanged(self, small_cnn, image_batch):
        x = image_batch[0]
        assert predict(inject_gates(small_cnn), x).tobytes() == predict(small_cnn, x).tobytes()

    def test_gate_count_hidden_only(self):
        gated = inject_gates(mlp([2, 3, 1], seed=0))
        assert [l.gate is not None for l in gated.layers] == [True, False]
        assert gated.layers[0].gate.tolist() == [1.0, 1.0, 1.0]

    def test_idempotent(self, tanh_mlp):
        once = inject_gates(tanh_mlp)
        once.layers[0].gate[0] = 0.5
        twice = inject_gates(once)
        assert twice.layers[0].gate[0] == 0.5

    def test_original_untouched(self, tanh_mlp):
        inject_gates(tanh_mlp)
        assert all(l.gate is None for l in tanh_mlp.layers)

    def test_unsupported_kind(self, tanh_mlp):
        tanh_mlp.layers[0].kind = "recurrent"
        with pytest.raises(StructuredUnsupportedError):
            inject_gates(tanh_mlp)

    def test_gate_keys_require_gates(self, tanh_mlp):
        with pytest.raises(StructuredUnsupportedError):
            gate_keys(tanh_mlp)


class TestGateScores:
    def test_dead_output_node_scores_zero(self, moons_batch):
        model = mlp([2, 4, 2], "tanh", seed=3)
        model.layers[1].weight[:, 2] = 0.0
        values = gate_scores(inject_gates(model), moons_batch).values
        assert values[2] == 0.0
        assert np.all(values[[0, 1, 3]] > 0)

    def test_duplicate_nodes_score_equally(self, moons_batch):
        model = mlp([2, 4, 2], "tanh", seed=3)
        model.layers[0].weight[1] = model.layers[0].weight[0]
        model.layers[1].weight[:, 1] = model.layers[1].weight[:, 0]
        values = gate_scores(inject_gates(model), moons_batch).values
        assert abs(values[0] - values[1]) < 1e-10

    def test_against_finite_difference_hvp(self, moons_batch):
        gated = inject_gates(mlp([2, 5, 4, 2], "tanh", seed=6))
        keys = gate_keys(gated)
        build = loss_builder(gated, moons_batch, keys)
        sizes = [gated.get(k).size for k in keys]

        def grad_at(c):
            _, g = ad.value_and_grad(build, np.split(c, np.cumsum(sizes)[:-1]))
            return np.concatenate(g)

        c = np.concatenate([gated.get(k) for k in keys])
        g = grad_at(c)
        expected = np.abs(ad.fd_hvp(grad_at, c, g, 1e-4))
        got = gate_scores(gated, moons_batch).values
        assert np.abs(got - expected).max() / expected.max() < 1e-4

    @pytest.mark.parametrize("criterion", ["crop", "grasp", "snip", "magnitude", "random"])
    def test_every_criterion_gives_one_score_per_node(self, criterion, small_cnn, image_batch):
        scores = gate_scores(inject_gates(small_cnn), image_batch, criterion)
        assert len(scores) == 3 + 4 + 5
        assert [s[0] for s in scores.segments] == [0, 1, 2]

    def test_conv_gate_scores_against_finite_differences(self, small_cnn, image_batch):
        gated = inject_gates(small_cnn)
        keys = gate_keys(gated)
        build = loss_builder(gated, image_batch, keys)
        sizes = [gated.get(k).size for k in keys]

        def grad_at(c):
            _, g = ad.value_and_grad(build, np.split(c, np.cumsum(sizes)[:-1]))
            return np.concatenate(g)

        c = np.concatenate([gated.get(k) for k in keys])
        expected = np.abs(ad.fd_hvp(grad_at, c, grad_at(c), 1e-4))
        got = gate_scores(gated, image_batch).values
        assert np.abs(got - expected).max() / expected.max() < 1e-4


class TestNodeMask:
    def test_half_of_six(self):
        scores = ScoreVector(np.array([3.0, 1.0, 2.0, 6.0, 5.0, 4.0]), "crop", segments=((0, 0, 3), (1, 3, 6)))
        mask = build_node_mask(scores, 0.5)
        assert mask.n_pruned == 3
        assert mask.node_sparsity == 0.5

    def test_ties_by_layer_then_node(self):
        scores = ScoreVector(np.ones(6), "crop", segments=((0, 0, 3), (1, 3, 6)))
        mask = build_node_mask(scores, 0.5)
        # layer 0 keeps its best-ranked (last) node; the next candidates are 0, 1, then 3
        np.testing.assert_array_equal(mask.flat(), [False, False, True, False, True, True])

    def test_layer_with_lowest_scores_keeps_its_best(self):
        scores = ScoreVector(np.array([0.1, 0.3, 0.2, 5.0, 6.0, 7.0]), "crop", segments=((0, 0, 3), (1, 3, 6)))
        mask = build_node_mask(scores, 0.5)
        np.testing.assert_array_equal(mask.keep[0], [False, True, False])
        np.testing.assert_array_equal(mask.keep[1], [False, True, True])

    def test_infeasible(self):
        scores = ScoreVector(np.ones(2), "crop", segments=((0, 0, 1), (1, 1, 2)))
        with pytest.raises(InfeasibleRatioError):
            build_node_mask(scores, 0.5)


class TestCompact:
    def test_parameter_count_example(self):
        model = mlp([4, 6, 2], seed=0)
        assert model.n_params() == 44
        mask = NodeMask((0,), (np.array([1, 0, 1, 0, 1, 0], dtype=bool),))
        small = compact(model, mask)
        assert small.n_params() == 23
        assert small.layers[0].weight.shape == (3, 4)
        assert small.layers[1].weight.shape == (2, 3)
        assert induced_weight_sparsity(model, small) == 1 - 23 / 44

    def test_conv_channel_removal(self):
        model = cnn((7, 7, 3), channels=(8, 4), n_out=2, seed=0)
        mask = NodeMask((0, 1), (np.arange(8) % 2 == 0, np.ones(4, dtype=bool)))
        small = compact(model, mask)
        assert small.layers[1].weight.shape == (4, 4, 3, 3)

    @pytest.mark.parametrize(
        "make",
        [
            lambda: mlp([3, 8, 6, 2], "relu", seed=1),
            lambda: mlp([3, 8, 6, 2], "tanh", seed=2),
            lambda: cnn((6, 6, 2), channels=(4, 5), n_out=3, hidden=(6,), seed=3),
            lambda: cnn((5, 5, 1), channels=(3,), n_out=2, seed=4),
        ],
    )
    def test_output_equivalence(self, make):
        model = make()
        rng = np.random.default_rng(0)
        mask = random_node_mask(model, rng)
        masked = apply_node_mask(model, mask)
        small = compact(model, mask)
        x = rng.standard_normal((100, *model.input_shape))
        np.testing.assert_allclose(predict(small, x), predict(masked, x), rtol=0, atol=1e-12)
        assert all(l.gate is None for l in small.layers)

    def test_existing_weight_masks_carried(self):
        model = mlp([3, 4, 2], seed=0)
        model.layers[1].weight_mask[0, 3] = False
        model.layers[1].weight[0, 3] = 0.0
        small = compact(model, NodeMask((0,), (np.array([0, 1, 1, 1], dtype=bool),)))
        assert not small.layers[1].weight_mask[0, 2]

    def test_output_layer_rejected(self, tanh_mlp):
        with pytest.raises(StructuredUnsupportedError, match="output layer"):
            compact(tanh_mlp, NodeMask((2,), (np.array([True, False]),)))

    def test_empty_layer_rejected(self, tanh_mlp):
        with pytest.raises(StructuredUnsupportedError, match="every node"):
            compact(tanh_mlp, NodeMask((0,), (np.zeros(8, dtype=bool),)))

    def test_wrong_size_rejected(self, tanh_mlp):
        with pytest.raises(StructuredUnsupportedError):
            compact(tanh_mlp, NodeMask((0,), (np.ones(3, dtype=bool),)))


@given(seed=st.integers(0, 10_000), p=st.floats(0.0, 0.9))
def test_compaction_equivalence_property(seed, p):
    rng = np.random.default_rng(seed)
    model = mlp([3, int(rng.integers(2, 9)), int(rng.integers(2, 9)), 2], "relu", seed=seed)
    mask = random_node_mask(model, rng, p)
    small = compact(model, mask)
    x = rng.standard_normal((20, 3))
    np.testing.assert_allclose(predict(small, x), predict(apply_node_mask(model, mask), x), rtol=0, atol=1e-12)
    assert induced_weight_sparsity(model, small) == 1 - small.n_params() / model.n_params()


def test_single_layer_model_has_no_gates():
    model = Model([Layer("dense", np.ones((2, 3)), np.zeros(2), "identity")])
    with pytest.raises(StructuredUnsupportedError):
        gate_keys(inject_gates(model))
