"""Central-difference verification of analytic gradients."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericalError, ParameterError, Tensor, backward, no_grad, precision


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element."""
    if not step > 0:
        raise ParameterError(f"step must be positive, got {step}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _scalar(f(Tensor(x)))
            flat[i] = orig - step
            lo = _scalar(f(Tensor(x)))
            flat[i] = orig
            grad.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    return grad


def _scalar(value: Tensor) -> float:
    v = float(np.asarray(value.data).reshape(-1)[0]) if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericalError("function returned a non-finite value during finite differencing")
    return v


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    _scalar(out)
    return backward(out, [xt])[id(xt)].astype(np.float64)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``1e-5 * max(1, max|n|)``: components many orders below the
    gradient's scale are compared absolutely, since central differences
    cannot resolve them relatively.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = 1e-5 * max(1.0, float(np.max(np.abs(n)))) if n.size else 1e-5
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_difference_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4,
                            analytic: np.ndarray | None = None, dtype=np.float64) -> float:
    """Max relative error between the backward-pass gradient of ``f`` and central differences.

    ``analytic`` overrides the backward-pass gradient, which is how the
    checker's own failure detection is tested.
    """
    with precision(dtype):
        x = np.asarray(x, dtype=dtype)
        if analytic is None:
            analytic = analytic_gradient(f, x)
        numeric = numerical_gradient(f, x, step)
    return relative_error(analytic, numeric)


# -- the op suite -------------------------------------------------------------------

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    cases: int
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= TOLERANCE


def _off_grid(rng, shape, n_rows, n_cols):
    """Flow coordinates whose pixel positions keep clear of bilinear kinks."""
    def axis(n, size):
        if n == 1:
            return np.zeros(size)
        cells = rng.integers(0, n - 1, size=size)
        return -1.0 + 2.0 * (cells + rng.uniform(0.1, 0.9, size=size)) / (n - 1)

    return np.stack([axis(n_rows, shape), axis(n_cols, shape)], axis=-1)


def _away_from_zero(rng, shape, low=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _cases(rng) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One freshly drawn ``(f, x)`` pair per op for this case's generator."""
    from .attention_flow import AttentionMap, RegisterTokens, attention, attention_to_flow, coordinate_map
    from .tensor import (bilinear_resize, concat, conv2d, linear, matmul, relu, rms_norm, row_normalize,
                         silu, softmax)
    from .warp import grid_sample, masked_l2, upsample_flow

    def c(shape):
        return Tensor(rng.standard_normal(shape))

    w = c((3, 4))
    other = c((3, 4))
    weight = c((3, 2, 3, 3))
    bias = c((3,))
    kernel_input = c((2, 2, 4, 4))
    image = c((2, 3, 6, 6))
    flow = Tensor(_off_grid(rng, (2, 6, 6), 6, 6))
    keys = c((1, 2, 6, 4))
    mask = Tensor((rng.uniform(size=(2, 1, 6, 6)) > 0.3).astype(np.float64))
    target = c((2, 3, 6, 6))
    reg = RegisterTokens(c((2, 4)), c((2, 4)))
    coords = coordinate_map(2, 3)
    lin_w, lin_b = c((4, 5)), c((5,))
    index = rng.integers(0, 3, size=4)
    weights = c((3, 4, 5)).square()
    tau = float(rng.uniform(0.3, 3.0))
    probe = {name: c(shape) for name, shape in {
        "getitem": (4, 4), "concat": (6, 4), "matmul_b": (2, 4, 5), "matmul": (2, 3, 5), "linear": (3, 5),
        "conv_k": (2, 3, 2, 2), "conv_b": (2, 3, 4, 4), "resize": (1, 2, 5, 4), "attention": (1, 2, 3, 8),
        "flow": (1, 2, 3, 2), "upsample": (1, 6, 6, 2)}.items()}
    chain_image, chain_target, chain_mask = image[0:1], target[0:1], mask[0:1]

    def chain(logits, registers=0):
        # (1, heads, 4 queries on a 2x2 grid, 2x3 keys [+ registers]) to a 6x6 warp
        amap = AttentionMap(softmax(logits, tau), 2, 3, registers)
        flow_ = attention_to_flow(amap.weights.mean(axis=-3), coords, registers).reshape(1, 2, 2, 2)
        warped = grid_sample(chain_image, upsample_flow(flow_, 6, 6))
        return (masked_l2(chain_target, warped, chain_mask)
                + masked_l2(chain_target, warped, chain_mask, "sum"))

    return {
        "add": (lambda x: ((x + other) * other).sum(), rng.standard_normal((3, 4))),
        "mul": (lambda x: (x * w * x).sum(), rng.standard_normal((3, 4))),
        "neg_sub": (lambda x: ((other - x) * w).sum(), rng.standard_normal((3, 4))),
        "scale": (lambda x: ((x / 3.0) * w).sum(), rng.standard_normal((3, 4))),
        "relu": (lambda x: (relu(x) * w).sum(), _away_from_zero(rng, (3, 4))),
        "silu": (lambda x: (silu(x) * w).sum(), rng.standard_normal((3, 4))),
        "rms_norm": (lambda x: (rms_norm(x) * w).sum(), rng.standard_normal((3, 4))),
        "row_normalize": (lambda x: (row_normalize(x) * w).sum(), rng.uniform(0.1, 1.0, size=(3, 4))),
        "reshape_transpose": (lambda x: (x.reshape(4, 3).transpose() * w).sum(), rng.standard_normal((3, 4))),
        "getitem": (lambda x: (x[index] * probe["getitem"]).sum(), rng.standard_normal((3, 4))),
        "concat": (lambda x: (concat([x, x * 2.0], axis=0) * probe["concat"]).sum(), rng.standard_normal((3, 4))),
        "sum_mean": (lambda x: (x.sum(axis=1) * x.mean(axis=0).sum()).sum(), rng.standard_normal((3, 4))),
        "matmul": (lambda x: (matmul(x, probe["matmul_b"]) * probe["matmul"]).sum(), rng.standard_normal((3, 4))),
        "linear": (lambda x: (linear(x, lin_w, lin_b) * probe["linear"]).sum(), rng.standard_normal((3, 4))),
        "softmax": (lambda x: (softmax(x, tau) * w).sum(), rng.standard_normal((3, 4))),
        "conv2d_input": (lambda x: conv2d(x, weight, bias).square().sum(), kernel_input.data),
        "conv2d_kernel": (lambda k: (conv2d(kernel_input, k, bias, stride=2) * probe["conv_k"]).sum(),
                          weight.data),
        "conv2d_bias": (lambda b: (conv2d(kernel_input, weight, b) * probe["conv_b"]).sum(), bias.data),
        "bilinear_resize": (lambda x: (bilinear_resize(x, 5, 4) * probe["resize"]).sum(),
                            rng.standard_normal((1, 2, 3, 3))),
        "grid_sample_image": (lambda x: (grid_sample(x, flow) * target).sum(), image.data),
        "grid_sample_flow": (lambda f: (grid_sample(image, f) * target).sum(), flow.data),
        "attention": (lambda q: (attention(q, keys, reg, tau, spatial=(2, 3)).weights * probe["attention"]).sum(),
                      rng.standard_normal((1, 2, 3, 4))),
        "attention_to_flow": (lambda a: (attention_to_flow(a, coords, 2) * probe["flow"]).sum(),
                              rng.uniform(0.05, 1.0, size=(1, 6, 8))),
        "upsample_flow": (lambda f: (upsample_flow(f, 6, 6) * probe["upsample"]).sum(),
                          rng.standard_normal((1, 3, 4, 2))),
        "masked_l2": (lambda x: masked_l2(target, x, mask) + masked_l2(target, x, mask, "sum"),
                      rng.standard_normal((2, 3, 6, 6))),
        "square": (lambda x: (weights * x.square()).sum(), rng.standard_normal((3, 4, 5))),
        "leffa_chain": (chain, rng.standard_normal((1, 2, 4, 6))),
        "leffa_chain_registers": (lambda x: chain(x, 2), rng.standard_normal((1, 2, 4, 8))),
    }


def run_suite(seed: int = 0, cases: int = 20, ops: Sequence[str] | None = None) -> list[CheckResult]:
    """64-bit finite-difference check of every differentiable op on ``cases`` seeded inputs."""
    if cases < 1:
        raise ParameterError(f"cases must be >= 1, got {cases}")
    worst: dict[str, float] = {}
    seconds: dict[str, float] = {}
    with precision(np.float64):
        for case in range(cases):
            rng = np.random.default_rng([seed, case])
            for name, (f, x) in _cases(rng).items():
                if ops is not None and name not in ops:
                    continue
                start = time.perf_counter()
                err = finite_difference_check(f, x)
                seconds[name] = seconds.get(name, 0.0) + time.perf_counter() - start
                worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, cases, worst[name], seconds[name]) for name in worst]


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.op) for r in results)
    lines = [f"{'op'.ljust(width)}  cases  max_rel_err  status"]
    for r in results:
        lines.append(f"{r.op.ljust(width)}  {r.cases:5d}  {r.max_rel_error:11.3e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
