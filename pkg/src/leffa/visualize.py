"""Attention heatmaps, flow colour maps and warped images for inspection."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import pnm
from .attention_flow import AttentionMap, average_heads
from .tensor import ParameterError, Tensor, constant
from .warp import grid_sample, layer_flows, upsample_flow

__all__ = ["flow_to_color", "attention_heatmap", "query_to_grid", "render_layers"]


def flow_to_color(flow) -> np.ndarray:
    """``(H, W, 2)`` flow to a ``(3, H, W)`` image.

    R = (col + 1) / 2, G = (row + 1) / 2, B = 0.5. The identity flow is a
    ramp from black-ish blue at the top left to yellow at the bottom right.
    """
    flow = np.asarray(getattr(flow, "data", flow), dtype=np.float64)
    if flow.ndim != 3 or flow.shape[-1] != 2:
        raise ParameterError(f"flow must be (H, W, 2), got {flow.shape}")
    rgb = np.stack([(flow[..., 1] + 1) / 2, (flow[..., 0] + 1) / 2, np.full(flow.shape[:2], 0.5)])
    return np.clip(rgb, 0.0, 1.0)


def query_to_grid(row: int, col: int, image_size, grid_size) -> int:
    """Flat index on an attention grid of the image pixel ``(row, col)``."""
    H, W = image_size
    h, w = grid_size
    if not (0 <= row < H and 0 <= col < W):
        raise ParameterError(f"query pixel {(row, col)} outside the {H}x{W} image")
    gr = 0 if H == 1 else int(round(row * (h - 1) / (H - 1)))
    gc = 0 if W == 1 else int(round(col * (w - 1) / (W - 1)))
    return gr * w + gc


def attention_heatmap(amap: AttentionMap, query: int, sample: int = 0) -> np.ndarray:
    """Head-averaged attention of one query over the reference grid, scaled to max 1."""
    weights = average_heads(amap).data
    if weights.ndim == 2:
        weights = weights[None]
    n_q = weights.shape[-2]
    if not 0 <= query < n_q:
        raise ParameterError(f"query index {query} outside [0, {n_q})")
    row = weights[sample, query, :amap.n_spatial].astype(np.float64)
    peak = row.max()
    heat = row / peak if peak > 0 else row
    return heat.reshape(1, amap.height, amap.width)


def render_layers(attention, layers, reference: np.ndarray, query: tuple[int, int],
                  out_dir, sample: int = 0) -> list[Path]:
    """Write heatmap (PGM), flow colours (PPM) and warped reference (PPM) per layer."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    H, W = reference.shape[-2:]
    written = []
    for layer in layers:
        amap = attention[layer]
        q = query_to_grid(query[0], query[1], (H, W), (amap.height, amap.width))
        heat = attention_heatmap(amap, q, sample)
        flow = upsample_flow(layer_flows(amap, average=True), H, W).data
        if flow.ndim == 4:
            flow = flow[sample]
        warped = grid_sample(constant(reference), Tensor(flow)).data
        paths = [out / f"layer{layer}_attention.pgm", out / f"layer{layer}_flow.ppm",
                 out / f"layer{layer}_warped.ppm"]
        pnm.write_pgm(heat, paths[0])
        pnm.write_ppm(flow_to_color(flow), paths[1])
        pnm.write_ppm(np.clip(warped, 0.0, 1.0), paths[2])
        written.extend(paths)
    return written
