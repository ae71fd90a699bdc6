"""Attention maps as flow fields.

Temperature-scaled dot-product attention over reference keys (plus
optional register tokens), head averaging, the normalized coordinate grid,
and the attention-weighted centroid that turns an attention row into a
sampling location in the reference image. Also the layer and timestep
selection rules that decide where the flow loss applies.

Coordinate channels are ordered (row, column) everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    ParameterError,
    Tensor,
    concat,
    constant,
    get_default_dtype,
    matmul,
    row_normalize,
    softmax,
)

__all__ = [
    "AttentionMap",
    "RegisterTokens",
    "LeffaConfig",
    "attention",
    "average_heads",
    "coordinate_map",
    "attention_to_flow",
    "select_layers",
    "timestep_in_scope",
    "init_registers",
    "FLOW_EPS",
]

FLOW_EPS = 1e-8
MASK_MODES = ("garment_mask", "all_ones")
REDUCTIONS = ("mean", "sum")


@dataclass
class AttentionMap:
    """Row-stochastic weights ``(..., heads, n_q, n_k + registers)``.

    The first ``height * width`` key columns are spatial reference tokens in
    row-major order; any trailing columns belong to register tokens.
    """

    weights: Tensor
    height: int
    width: int
    registers: int = 0

    @property
    def n_spatial(self) -> int:
        return self.height * self.width

    @property
    def heads(self) -> int:
        return self.weights.shape[-3]


@dataclass
class RegisterTokens:
    keys: Tensor
    values: Tensor

    @property
    def count(self) -> int:
        return self.keys.shape[-2]


def init_registers(count: int, dim: int, rng: np.random.Generator, std: float = 0.02,
                   requires_grad: bool = True) -> RegisterTokens | None:
    """Gaussian-initialized learnable register keys/values, or ``None`` for ``count == 0``."""
    if count < 0:
        raise ParameterError(f"register count must be >= 0, got {count}")
    if count == 0:
        return None
    keys = Tensor(rng.normal(0.0, std, size=(count, dim)), requires_grad=requires_grad)
    values = Tensor(rng.normal(0.0, std, size=(count, dim)), requires_grad=requires_grad)
    return RegisterTokens(keys, values)


@dataclass
class LeffaConfig:
    lambda_leffa: float = 1e-3
    temperature: float = 2.0
    theta_resolution: float = 1.0 / 32
    theta_timestep: int = 500
    register_count: int = 0
    average_heads: bool = True
    upsample_flow: bool = True
    mask_mode: str = "garment_mask"
    loss_reduction: str = "mean"

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ParameterError("; ".join(problems))

    def violations(self) -> list[str]:
        problems = []
        if not self.temperature > 0:
            problems.append(f"temperature must be > 0, got {self.temperature}")
        if not self.lambda_leffa >= 0:
            problems.append(f"lambda_leffa must be >= 0, got {self.lambda_leffa}")
        if not 0 < self.theta_resolution <= 1:
            problems.append(f"theta_resolution must be in (0, 1], got {self.theta_resolution}")
        if self.theta_timestep < 0:
            problems.append(f"theta_timestep must be >= 0, got {self.theta_timestep}")
        if self.register_count < 0:
            problems.append(f"register_count must be >= 0, got {self.register_count}")
        if self.mask_mode not in MASK_MODES:
            problems.append(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.loss_reduction not in REDUCTIONS:
            problems.append(f"loss_reduction must be one of {REDUCTIONS}, got {self.loss_reduction!r}")
        return problems


def _guess_grid(n: int) -> tuple[int, int]:
    side = math.isqrt(n)
    return (side, side) if side * side == n else (1, n)


def attention(q: Tensor, k: Tensor, registers: RegisterTokens | None = None,
              temperature: float = 1.0, spatial: tuple[int, int] | None = None) -> AttentionMap:
    """``softmax(q [k; register keys]^T / sqrt(d) / temperature)``.

    ``q`` is ``(..., heads, n_q, d)`` and ``k`` is ``(..., heads, n_k, d)``.
    Register keys may be ``(r, d)`` (shared by all heads) or ``(heads, r, d)``
    and are appended after the spatial keys.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if q.ndim < 3 or k.ndim < 3:
        raise DimensionError(f"q and k need (heads, n, d) layout, got {q.shape} and {k.shape}")
    if q.shape[-1] != k.shape[-1] or q.shape[-3] != k.shape[-3]:
        raise DimensionError(f"head/dim mismatch between q {q.shape} and k {k.shape}")
    d = q.shape[-1]
    n_k = k.shape[-2]
    keys = k
    r = 0
    if registers is not None and registers.count > 0:
        rk = registers.keys
        if rk.shape[-1] != d:
            raise DimensionError(f"register keys {rk.shape} do not match head dim {d}")
        if rk.ndim == 2:
            rk = rk.reshape(1, *rk.shape)
        target = k.shape[:-2] + rk.shape[-2:]
        rk = rk + constant(np.zeros(target, dtype=rk.dtype))
        keys = concat([k, rk], axis=-2)
        r = registers.count
    logits = matmul(q, keys.transpose(_swap_last(keys.ndim))) * (1.0 / math.sqrt(d))
    h, w = spatial if spatial is not None else _guess_grid(n_k)
    if h * w != n_k:
        raise DimensionError(f"spatial grid {h}x{w} does not cover {n_k} keys")
    return AttentionMap(softmax(logits, temperature), h, w, r)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def average_heads(a: AttentionMap) -> Tensor:
    """Arithmetic mean over the head axis."""
    return a.weights.mean(axis=-3)


def coordinate_map(h: int, w: int, dtype=None) -> Tensor:
    """Normalized ``(h, w, 2)`` grid from ``[-1, -1]`` (top-left) to ``[1, 1]`` (bottom-right).

    A length-1 axis sits at coordinate 0.
    """
    if h < 1 or w < 1:
        raise ParameterError(f"grid size must be positive, got {(h, w)}")
    rows = _axis_coords(h)
    cols = _axis_coords(w)
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    return constant(grid.astype(dtype or get_default_dtype()))


def _axis_coords(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(n) / (n - 1)


def attention_to_flow(avg: Tensor, coords: Tensor, registers: int = 0) -> Tensor:
    """Attention-weighted centroid of the key coordinates.

    ``avg`` is ``(..., n_q, n_k + registers)``. Without registers this is the
    plain product of attention and coordinates. With registers the spatial
    block is renormalized first (guarded by ``FLOW_EPS``) so the flow stays a
    convex combination of real grid locations. The result is
    ``(..., h, w, 2)`` when ``n_q`` matches the coordinate grid and
    ``(..., n_q, 2)`` otherwise.
    """
    h, w = coords.shape[:2]
    n_k = h * w
    if avg.shape[-1] != n_k + registers:
        raise DimensionError(
            f"attention has {avg.shape[-1]} key columns, expected {n_k} spatial + {registers} registers")
    flat = coords.reshape(n_k, 2)
    spatial = avg if registers == 0 else avg[..., :n_k]
    if registers:
        spatial = row_normalize(spatial, FLOW_EPS)
    flow = matmul(spatial, flat)
    n_q = avg.shape[-2]
    if n_q == n_k:
        flow = flow.reshape(*avg.shape[:-2], h, w, 2)
    return flow


def select_layers(layer_heights, image_height: int, theta_resolution: float) -> list[int]:
    """Indices of layers whose height ratio ``h / H`` is at least ``theta_resolution``."""
    if not 0 < theta_resolution <= 1:
        raise ParameterError(f"theta_resolution must be in (0, 1], got {theta_resolution}")
    chosen = []
    for i, h in enumerate(layer_heights):
        if h < 1:
            raise ParameterError(f"layer height must be >= 1, got {h}")
        # cross-multiplied so exact ratios like 1/32 are not lost to rounding
        if h >= theta_resolution * image_height * (1 - 1e-12):
            chosen.append(i)
    return chosen


def timestep_in_scope(t: int, theta_timestep: int) -> bool:
    return t < theta_timestep
