import math

import numpy as np
import pytest

from leffa.diffusion import (
    DiffusionSchedule,
    add_noise,
    combined_loss,
    ddpm_sample,
    diffusion_loss,
    noise_with_alpha_bar,
)
from leffa.tensor import ParameterError, Tensor, backward, precision


class TestSchedule:
    def test_alpha_bars_match_loop_oracle(self):
        s = DiffusionSchedule()
        prod = 1.0
        for t in range(1000):
            beta = 1e-4 + (2e-2 - 1e-4) * t / 999
            prod *= 1 - beta
            if t in (0, 1, 99, 500, 999):
                assert s.alpha_bar(t) == pytest.approx(prod, rel=1e-12)

    def test_monotone_and_bounded(self):
        s = DiffusionSchedule()
        assert 0 < s.betas[0] <= s.betas[-1] < 1
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert s.alpha_bar_prev(0) == 1.0
        assert s.alpha_bar_prev(10) == s.alpha_bar(9)

    def test_range_checked(self):
        with pytest.raises(ParameterError):
            DiffusionSchedule().alpha_bar(1000)
        with pytest.raises(ParameterError):
            DiffusionSchedule(beta_min=0.5, beta_max=0.1)


class TestNoise:
    def test_limits(self, rng):
        with precision(np.float64):
            z0, eps = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))
            assert np.allclose(noise_with_alpha_bar(z0, eps, 1.0).data, z0.data)
            assert np.allclose(noise_with_alpha_bar(z0, eps, 0.0).data, eps.data)
            assert noise_with_alpha_bar(Tensor([1.0]), Tensor([0.0]), 0.25).data.tolist() == [0.5]

    def test_per_sample_timesteps(self, rng):
        s = DiffusionSchedule()
        z0 = Tensor(rng.standard_normal((2, 3, 4, 4)))
        eps = Tensor(rng.standard_normal((2, 3, 4, 4)))
        out = add_noise(z0, np.array([10, 900]), eps, s).data
        for n, t in enumerate((10, 900)):
            a = s.alpha_bar(t)
            np.testing.assert_allclose(out[n], math.sqrt(a) * z0.data[n] + math.sqrt(1 - a) * eps.data[n],
                                       rtol=1e-5, atol=1e-6)


class TestLosses:
    def test_diffusion_loss_values(self, rng):
        eps = Tensor(rng.standard_normal((2, 3)))
        assert diffusion_loss(eps, eps).item() == 0.0
        assert diffusion_loss(eps + 1.0, eps).item() == pytest.approx(1.0, rel=1e-6)
        assert diffusion_loss(Tensor([0.0, 0.0]), Tensor([1.0, 3.0])).item() == 5.0

    def test_combined(self):
        d = Tensor(0.5)
        assert combined_loss(d, Tensor(2.0), 0.0) is d
        assert combined_loss(d, None, 1e-3) is d
        with precision(np.float64):
            assert combined_loss(Tensor(0.5), Tensor(2.0), 1e-3).item() == pytest.approx(0.502)
        with pytest.raises(ParameterError):
            combined_loss(d, Tensor(1.0), -1.0)

    def test_gated_term_contributes_no_gradient(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        flow_param = Tensor([3.0], requires_grad=True)
        l_diff = (p * p).sum()
        total = combined_loss(l_diff, None, 1e-3)
        g = backward(total, [p, flow_param])
        assert np.array_equal(g[id(flow_param)], [0.0])


def test_sampler_runs_and_is_seeded():
    s = DiffusionSchedule(T=20)
    a = ddpm_sample(lambda z, t: np.zeros_like(z), (2, 3), s, np.random.default_rng(0))
    b = ddpm_sample(lambda z, t: np.zeros_like(z), (2, 3), s, np.random.default_rng(0))
    assert a.shape == (2, 3) and np.array_equal(a, b) and np.all(np.isfinite(a))
