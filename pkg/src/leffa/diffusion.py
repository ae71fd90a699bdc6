"""Noise schedule, forward noising and the denoising objectives.

Timesteps are 0-indexed: ``t`` in ``[0, T)`` uses the cumulative product
of ``1 - beta`` up to and including step ``t``. The "before step 0" value
is 1 (no noise), which only the ancestral sampler needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, ParameterError, Tensor, constant

__all__ = [
    "DiffusionSchedule",
    "add_noise",
    "noise_with_alpha_bar",
    "diffusion_loss",
    "combined_loss",
    "ddpm_sample",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        if not 0 < self.beta_min <= self.beta_max < 1:
            raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {self.beta_min}, {self.beta_max}")
        betas = np.linspace(self.beta_min, self.beta_max, self.T)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ParameterError(f"timestep out of range [0, {self.T}): {t}")
        return self.alpha_bars[t]

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def noise_with_alpha_bar(z0: Tensor, noise: Tensor, alpha_bar) -> Tensor:
    """``sqrt(a) * z0 + sqrt(1 - a) * noise``; ``a`` may be per-sample."""
    if z0.shape != noise.shape:
        raise DimensionError(f"z0 {z0.shape} and noise {noise.shape} differ")
    a = np.asarray(alpha_bar, dtype=np.float64)
    if a.ndim:
        a = a.reshape(a.shape + (1,) * (z0.ndim - a.ndim))
    signal = constant(np.sqrt(a).astype(z0.dtype))
    spread = constant(np.sqrt(1.0 - a).astype(z0.dtype))
    return z0 * signal + noise * spread


def add_noise(z0: Tensor, t, noise: Tensor, schedule: DiffusionSchedule) -> Tensor:
    return noise_with_alpha_bar(z0, noise, schedule.alpha_bar(t))


def diffusion_loss(predicted_noise: Tensor, noise: Tensor) -> Tensor:
    """Mean squared error between predicted and true noise."""
    if predicted_noise.shape != noise.shape:
        raise DimensionError(f"prediction {predicted_noise.shape} and noise {noise.shape} differ")
    diff = predicted_noise - noise
    return (diff * diff).mean()


def combined_loss(l_diffusion: Tensor, l_leffa: Tensor | None, lambda_leffa: float) -> Tensor:
    """``l_diffusion + lambda * l_leffa``.

    A ``None`` flow term (timestep out of scope, no selected layer) or a zero
    weight returns ``l_diffusion`` itself, so gated steps are bit-identical to
    runs without the term.
    """
    if lambda_leffa < 0:
        raise ParameterError(f"lambda_leffa must be >= 0, got {lambda_leffa}")
    if l_leffa is None or lambda_leffa == 0:
        return l_diffusion
    return l_diffusion + l_leffa * lambda_leffa


def ddpm_sample(predict_noise, shape, schedule: DiffusionSchedule, rng: np.random.Generator,
                steps: int | None = None) -> np.ndarray:
    """Plain ancestral sampling, for visual sanity checks only.

    ``predict_noise(z_t, t)`` returns an array of ``shape``.
    """
    z = rng.standard_normal(shape)
    last = schedule.T if steps is None else min(steps, schedule.T)
    for t in reversed(range(last)):
        beta = schedule.betas[t]
        a_bar = schedule.alpha_bars[t]
        eps = np.asarray(predict_noise(z, t), dtype=np.float64)
        mean = (z - beta / np.sqrt(1.0 - a_bar) * eps) / np.sqrt(1.0 - beta)
        if t > 0:
            var = beta * (1.0 - schedule.alpha_bar_prev(t)) / (1.0 - a_bar)
            z = mean + np.sqrt(var) * rng.standard_normal(shape)
        else:
            z = mean
    return z
