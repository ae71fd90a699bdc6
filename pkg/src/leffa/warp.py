"""Flow upsampling, bilinear grid sampling and the masked flow-warp loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention_flow import (
    AttentionMap,
    LeffaConfig,
    attention_to_flow,
    average_heads,
    coordinate_map,
)
from .tensor import (
    DimensionError,
    ParameterError,
    Tensor,
    bilinear_resize,
    constant,
)

__all__ = [
    "WarpResult",
    "upsample_flow",
    "grid_sample",
    "leffa_loss",
    "masked_l2",
    "layer_flows",
    "layer_warps",
    "resize_mask",
    "leffa_term",
]


@dataclass
class WarpResult:
    warped: Tensor
    per_layer_loss: Tensor | None = None
    layer_index: int = -1


def upsample_flow(flow: Tensor, out_h: int, out_w: int) -> Tensor:
    """Channelwise align-corners bilinear resize of a ``(..., h, w, 2)`` flow."""
    if flow.shape[-1] != 2:
        raise DimensionError(f"flow must end in 2 channels, got {flow.shape}")
    nd = flow.ndim
    to_channels = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    back = tuple(range(nd - 3)) + (nd - 2, nd - 1, nd - 3)
    return bilinear_resize(flow.transpose(to_channels), out_h, out_w).transpose(back)


def _snap_tolerance(dtype, n: int) -> float:
    return 8.0 * float(np.finfo(dtype).eps) * max(n - 1, 1)


def _source_positions(coord: np.ndarray, n: int):
    """Pixel positions for normalized coordinates along an axis of length ``n``.

    Returns ``(lo, hi, frac, inside)``; ``inside`` marks coordinates that were
    not clamped, i.e. where the position depends on the coordinate.
    """
    if n == 1:
        zeros = np.zeros(coord.shape, dtype=np.intp)
        return zeros, zeros, np.zeros_like(coord), np.zeros(coord.shape, dtype=bool)
    pos = (coord + 1.0) * 0.5 * (n - 1)
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) <= _snap_tolerance(coord.dtype, n), nearest, pos)
    inside = (pos >= 0) & (pos <= n - 1)
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, (pos - lo).astype(coord.dtype), inside


def grid_sample(image: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``image`` by sampling it at the normalized locations in ``flow``.

    ``image`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``flow`` is ``(Ho, Wo, 2)``
    or ``(N, Ho, Wo, 2)`` with (row, column) channels. Align-corners mapping,
    border clamping. Locations within a few ulps of a pixel centre snap onto
    it, so sampling at the identity grid returns the image bit for bit.
    """
    unbatched = image.ndim == 3
    img = image.data[None] if unbatched else image.data
    fl = flow.data[None] if flow.ndim == 3 else flow.data
    if img.ndim != 4 or fl.ndim != 4 or fl.shape[-1] != 2:
        raise DimensionError(f"grid_sample expects image (N,C,H,W) and flow (N,H,W,2), got {image.shape}, {flow.shape}")
    if fl.shape[0] != img.shape[0]:
        if fl.shape[0] == 1:
            fl = np.broadcast_to(fl, (img.shape[0],) + fl.shape[1:])
        else:
            raise DimensionError(f"batch mismatch: image {image.shape}, flow {flow.shape}")
    n, c, h, w = img.shape
    ho, wo = fl.shape[1:3]
    dtype = img.dtype
    fl = fl.astype(dtype, copy=False)
    y0, y1, fy, in_y = _source_positions(fl[..., 0], h)
    x0, x1, fx, in_x = _source_positions(fl[..., 1], w)

    batch = np.arange(n)[:, None, None]

    def gather(yi, xi):
        # (N, Ho, Wo, C) -> (N, C, Ho, Wo)
        return img[batch, :, yi, xi].transpose(0, 3, 1, 2)

    v00, v01 = gather(y0, x0), gather(y0, x1)
    v10, v11 = gather(y1, x0), gather(y1, x1)
    fxb, fyb = fx[:, None], fy[:, None]
    top = v00 + fxb * (v01 - v00)
    bot = v10 + fxb * (v11 - v10)
    out = top + fyb * (bot - top)
    # keep rounding from stepping outside the four corner values
    lo_v = np.minimum(np.minimum(v00, v01), np.minimum(v10, v11))
    hi_v = np.maximum(np.maximum(v00, v01), np.maximum(v10, v11))
    out = np.clip(out, lo_v, hi_v)
    if unbatched:
        out = out[0]

    flow_batched = flow.ndim == 4
    flow_shared = flow_batched and flow.shape[0] == 1 and n > 1

    def grad_fn(g):
        g4 = g[None] if unbatched else g
        g_img = None
        if image.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
            total = np.zeros(n * c * h * w, dtype=np.float64)
            for yi, xi, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                                (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
                idx = base + (yi * w + xi)[:, None]
                total += np.bincount(idx.reshape(-1), weights=(g4 * wgt[:, None]).reshape(-1),
                                     minlength=total.size)
            g_img = total.reshape(n, c, h, w).astype(dtype)
            if unbatched:
                g_img = g_img[0]
        g_flow = None
        if flow.requires_grad:
            d_fx = (1 - fyb) * (v01 - v00) + fyb * (v11 - v10)
            d_fy = bot - top
            gy = (g4 * d_fy).sum(axis=1) * (0.5 * (h - 1)) * in_y
            gx = (g4 * d_fx).sum(axis=1) * (0.5 * (w - 1)) * in_x
            g_flow = np.stack([gy, gx], axis=-1).astype(dtype)
            if flow_shared:
                g_flow = g_flow.sum(axis=0, keepdims=True)
            elif not flow_batched:
                g_flow = g_flow[0]
        return g_img, g_flow

    return Tensor._result(out, (image, flow), grad_fn)


def masked_l2(target: Tensor, warped: Tensor, mask: Tensor, reduction: str = "mean") -> Tensor:
    """``reduce(mask * (target - warped)^2)``.

    ``mean`` divides by (masked pixels x channels), ``sum`` is the raw total.
    Leading batch axes are averaged for ``sum`` so one sample and a batch of
    identical samples give the same value.
    """
    if target.shape != warped.shape:
        raise DimensionError(f"target {target.shape} and warped {warped.shape} differ")
    if mask.shape[-2:] != target.shape[-2:] or mask.shape[-3] != 1:
        raise DimensionError(f"mask {mask.shape} does not match image {target.shape}")
    diff = target - warped
    sq = diff * diff * mask
    if reduction == "sum":
        batch = int(np.prod(target.shape[:-3])) if target.ndim > 3 else 1
        return sq.sum() * (1.0 / batch)
    if reduction != "mean":
        raise ParameterError(f"unknown reduction {reduction!r}")
    channels = target.shape[-3]
    if mask.ndim < target.ndim:
        count = float(mask.data.sum()) * channels * int(np.prod(target.shape[:-3]))
    else:
        count = float(mask.data.sum()) * channels
    if count == 0:
        return sq.sum() * 0.0
    return sq.sum() * (1.0 / count)


def leffa_loss(warps: Sequence[WarpResult | Tensor], target: Tensor, mask: Tensor,
               reduction: str = "mean") -> Tensor:
    """Sum over layers of the masked squared error between target and each warp.

    Warps may be full-resolution or, for the no-upsampling variant, already
    at their layer resolution; target and mask are then resized to match.
    """
    total = constant(np.zeros((), dtype=target.dtype))
    for item in warps:
        warped = item.warped if isinstance(item, WarpResult) else item
        tgt, msk = target, mask
        if warped.shape[-2:] != target.shape[-2:]:
            tgt = bilinear_resize(target, *warped.shape[-2:])
            msk = resize_mask(mask, *warped.shape[-2:])
        loss = masked_l2(tgt, warped, msk, reduction)
        if isinstance(item, WarpResult):
            item.per_layer_loss = loss
        total = total + loss
    return total


def resize_mask(mask: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize followed by a 0.5 threshold, keeping the mask binary."""
    if mask.shape[-2:] == (out_h, out_w):
        return mask
    soft = bilinear_resize(mask, out_h, out_w).data
    return constant((soft >= 0.5).astype(mask.dtype))


def layer_flows(amap: AttentionMap, average: bool = True) -> Tensor:
    """Flow field(s) of one attention layer.

    ``(..., h, w, 2)`` from the head-averaged map, or ``(..., heads, h, w, 2)``
    with one flow per head when ``average`` is off.
    """
    coords = coordinate_map(amap.height, amap.width, dtype=amap.weights.dtype)
    weights = average_heads(amap) if average else amap.weights
    return attention_to_flow(weights, coords, amap.registers)


def layer_warps(amap: AttentionMap, reference: Tensor, config: LeffaConfig,
                size: tuple[int, int], layer_index: int = -1) -> list[WarpResult]:
    """Warp ``reference`` (``(N, C, H, W)``) with the flow(s) of one layer.

    One result for the head-averaged flow, or one per head when head
    averaging is disabled. Without flow upsampling the reference is resized
    down to the attention grid and warped there.
    """
    flow = layer_flows(amap, config.average_heads)
    height, width = size
    if config.upsample_flow:
        out_h, out_w = height, width
        source = reference
    else:
        out_h, out_w = amap.height, amap.width
        source = bilinear_resize(reference, out_h, out_w)
    if config.average_heads:
        flows = [flow]
    else:
        flows = [flow[..., head, :, :, :] for head in range(amap.heads)]
    results = []
    for f in flows:
        if config.upsample_flow:
            f = upsample_flow(f, out_h, out_w)
        results.append(WarpResult(grid_sample(source, f), layer_index=layer_index))
    return results


def leffa_term(maps: Sequence[AttentionMap], layers: Sequence[int], reference: Tensor,
               target: Tensor, mask: Tensor, config: LeffaConfig) -> tuple[Tensor, list[WarpResult]]:
    """Flow-warp loss summed over the selected attention layers.

    Per-head flows (head averaging off) contribute the mean of their
    per-head losses, so a layer weighs the same either way.
    """
    size = target.shape[-2:]
    total = constant(np.zeros((), dtype=target.dtype))
    results: list[WarpResult] = []
    for index in layers:
        warps = layer_warps(maps[index], reference, config, size, layer_index=index)
        layer_loss = leffa_loss(warps, target, mask, config.loss_reduction)
        if len(warps) > 1:
            layer_loss = layer_loss * (1.0 / len(warps))
        total = total + layer_loss
        results.extend(warps)
    return total, results
