import numpy as np
import pytest

from leffa.attention_flow import LeffaConfig
from leffa.model import ConfigurationError, DualBranchModel, ModelConfig, extract_cross_attention, \
    timestep_embedding
from leffa.tensor import ContractError, DimensionError, Tensor, backward, constant, softmax


def small(**kw):
    return ModelConfig(widths=(8, 8), heads=2, time_dim=8, **kw)


def inputs(rng, n=2, h=16, w=16, aux=3):
    return (Tensor(rng.standard_normal((n, 3, h, w))), Tensor(rng.uniform(size=(n, aux, h, w))),
            Tensor(rng.uniform(size=(n, 3, h, w))))


class TestForward:
    def test_shapes(self, rng):
        model = DualBranchModel(small())
        z, aux, ref = inputs(rng)
        out = model(z, aux, ref, np.array([5, 700]))
        assert out.noise.shape == (2, 3, 16, 16)
        assert [(a.height, a.width) for a in out.attention] == [(8, 8), (4, 4)]
        assert out.attention[0].weights.shape == (2, 2, 64, 64)
        assert [m.shape for m in out.reference_mass] == [(2, 2, 64), (2, 2, 16)]

    def test_attention_rows_stochastic(self, rng):
        model = DualBranchModel(small(), LeffaConfig(register_count=2))
        out = model(*inputs(rng), np.array([1, 999]))
        for amap in out.attention:
            np.testing.assert_allclose(amap.weights.data.sum(-1), 1.0, atol=1e-5)

    def test_zero_weights_give_uniform_attention(self, rng):
        model = DualBranchModel(small(), init="zeros")
        out = model(*inputs(rng), np.array([3, 3]))
        for amap in out.attention:
            np.testing.assert_allclose(amap.weights.data, 1.0 / amap.n_spatial, atol=1e-7)
        assert np.all(out.noise.data == 0)

    def test_unbatched_input(self, rng):
        model = DualBranchModel(small())
        z, aux, ref = inputs(rng, n=1)
        a = model(Tensor(z.data[0]), Tensor(aux.data[0]), Tensor(ref.data[0]), 10).noise.data
        b = model(z, aux, ref, np.array([10])).noise.data
        np.testing.assert_array_equal(a, b)

    def test_seeded_init(self):
        a, b = DualBranchModel(small(), seed=3).state_dict(), DualBranchModel(small(), seed=3).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_errors(self, rng):
        model = DualBranchModel(small())
        z, aux, ref = inputs(rng)
        with pytest.raises(ContractError):
            model(Tensor(np.zeros((1, 3, 10, 10))), Tensor(np.zeros((1, 3, 10, 10))),
                  Tensor(np.zeros((1, 3, 10, 10))), 0)
        with pytest.raises(ConfigurationError):
            model(z, aux, Tensor(np.zeros((2, 3, 8, 8))), 0)
        with pytest.raises(DimensionError):
            model(z, Tensor(np.zeros((2, 1, 16, 16))), ref, 0)
        with pytest.raises(ConfigurationError):
            DualBranchModel(ModelConfig(widths=(6, 8), heads=4))


class TestLayerSelection:
    def test_default_selects_both_levels(self):
        assert DualBranchModel(small()).selected == [0, 1]

    def test_coarse_threshold(self):
        model = DualBranchModel(small(), LeffaConfig(theta_resolution=1 / 2))
        assert model.selected == [0]
        assert model.temperature(0) == 2.0 and model.temperature(1) == 1.0

    def test_registers_only_on_selected_layers(self):
        model = DualBranchModel(small(), LeffaConfig(theta_resolution=1 / 2, register_count=3))
        assert "reg.0.keys" in model.params and "reg.1.keys" not in model.params
        assert model.params["reg.0.keys"].shape == (3, 8)


class TestGradients:
    def test_reference_branch_receives_gradient(self, rng):
        model = DualBranchModel(small())
        out = model(*inputs(rng), np.array([10, 10]))
        loss = out.noise.square().mean()
        params = list(model.trainable().values())
        grads = backward(loss, params)
        assert np.abs(grads[id(model.params["ref.stem.w"])]).sum() > 0

    def test_frozen_reference_is_not_trainable(self, rng):
        model = DualBranchModel(small(freeze_reference=True))
        assert not any(k.startswith("ref.") for k in model.trainable())
        assert all(not model.params[k].requires_grad for k in model.params if k.startswith("ref."))


class TestExtractCrossAttention:
    def test_picks_reference_block_and_renormalizes(self):
        full = np.array([[0.5, 0.0, 0.25, 0.25, 0.0],
                         [0.1, 0.1, 0.0, 0.8, 0.0],
                         [0.2, 0.2, 0.2, 0.2, 0.2]])
        amap, mass = extract_cross_attention(Tensor(full), 2, 1, 2, registers=1)
        assert amap.weights.shape == (2, 3)
        np.testing.assert_allclose(amap.weights.data, [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0]])
        np.testing.assert_allclose(mass, [0.5, 0.8])

    def test_key_count_checked(self):
        with pytest.raises(DimensionError):
            extract_cross_attention(Tensor(np.ones((2, 5)) / 5), 2, 2, 2)

    def test_gradient_flows_through_extraction(self, rng):
        logits = Tensor(rng.standard_normal((4, 12)), requires_grad=True)
        amap, _ = extract_cross_attention(softmax(logits), 4, 2, 4)
        g = backward((amap.weights * constant(rng.standard_normal((4, 8)))).sum(), [logits])[id(logits)]
        assert np.abs(g).sum() > 0


def test_timestep_embedding():
    e = timestep_embedding(np.array([0, 10]), 8)
    assert e.shape == (2, 8)
    np.testing.assert_array_equal(e[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.abs(e).max() <= 1
