"""Procedural correspondence tasks with exact ground-truth flow.

Every generator builds a reference image, a ground-truth flow that maps
each target pixel to an integer reference pixel, and the target as
``grid_sample(reference, gt_flow)`` inside the mask. Because every sampled
location is a pixel centre, targets survive 8-bit quantization exactly.
Outside the mask the flow is the identity grid.
"""
from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, pnm
from .attention_flow import coordinate_map
from .tensor import ParameterError, Tensor, no_grad, precision
from .warp import grid_sample

__all__ = [
    "SyntheticSample",
    "SyntheticDataset",
    "TASK_KINDS",
    "gen_patch_permutation",
    "gen_stripes",
    "gen_shift",
    "gen_tryon_fill",
    "generate",
    "sample_seed",
    "write_dataset",
    "read_dataset",
    "aux_channels_for",
]

TASK_KINDS = ("patch_permutation", "shift", "stripes", "tryon_fill")
PATCH_LAYOUTS = ("graded", "shuffled")


@dataclass
class SyntheticSample:
    reference: np.ndarray  # (3, H, W)
    target: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (1, H, W)
    aux: np.ndarray  # (k, H, W)
    gt_flow: np.ndarray  # (H, W, 2)
    task_kind: str
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.target.shape[-2:]


def aux_channels_for(task_kind: str) -> int:
    return 4 if task_kind == "tryon_fill" else 3


def _pixel_coords(rows: np.ndarray, cols: np.ndarray, h: int, w: int) -> np.ndarray:
    def norm(p, n):
        return np.zeros_like(p, dtype=np.float64) if n == 1 else -1.0 + 2.0 * p / (n - 1)

    return np.stack([norm(rows, h), norm(cols, w)], axis=-1).astype(np.float32)


def _warp(reference: np.ndarray, flow: np.ndarray) -> np.ndarray:
    with precision(np.float32), no_grad():
        return np.array(grid_sample(Tensor(reference), Tensor(flow)).data)


def _identity_flow(h: int, w: int) -> np.ndarray:
    with precision(np.float32):
        return np.array(coordinate_map(h, w).data)


def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _texture(rng, base_rgb, h, w, amplitude=0.12):
    noise = rng.uniform(-amplitude, amplitude, size=(3, h, w))
    return np.clip(base_rgb[:, None, None] + noise, 0.0, 1.0)


def gen_patch_permutation(seed: int, grid_n: int = 4, H: int = 32, W: int = 32,
                          permutation=None, layout: str = "graded") -> SyntheticSample:
    """Reference grid of distinctly coloured noisy patches; target shuffles them.

    ``permutation[p]`` is the reference patch shown at target patch ``p``
    (row-major patch indices).

    ``layout="graded"`` colours the reference with a smooth ramp (red down
    the rows, blue across the columns) plus a per-patch colour offset and
    per-pixel noise, so neighbouring patches differ slightly and the image
    has large-scale structure. ``layout="shuffled"`` gives every patch a
    random hue, making the reference piecewise constant up to noise; warp
    gradients then carry no information about where a source patch lies.
    """
    if grid_n < 1 or H % grid_n or W % grid_n:
        raise ParameterError(f"H={H} and W={W} must be divisible by grid_n={grid_n}")
    if layout not in PATCH_LAYOUTS:
        raise ParameterError(f"layout must be one of {PATCH_LAYOUTS}, got {layout!r}")
    rng = np.random.default_rng(seed)
    ph, pw = H // grid_n, W // grid_n
    count = grid_n * grid_n
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    pr, pc = ii // ph, jj // pw
    if layout == "graded":
        ramp = np.stack([0.1 + 0.8 * ii / max(H - 1, 1), np.full((H, W), 0.5), 0.1 + 0.8 * jj / max(W - 1, 1)])
        offsets = rng.uniform(-0.05, 0.05, size=(3, grid_n, grid_n))
        reference = np.clip(ramp + offsets[:, pr, pc] + rng.uniform(-0.03, 0.03, size=(3, H, W)), 0.0, 1.0)
    else:
        hues = (np.arange(count) / count + rng.uniform()) % 1.0
        rng.shuffle(hues)
        reference = np.empty((3, H, W))
        for p in range(count):
            r, c = divmod(p, grid_n)
            rgb = _hsv(hues[p], rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95))
            reference[:, r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] = _texture(rng, rgb, ph, pw)
    perm = rng.permutation(count) if permutation is None else np.asarray(permutation)
    if sorted(perm.tolist()) != list(range(count)):
        raise ParameterError(f"not a permutation of {count} patches: {perm}")
    src_r, src_c = np.divmod(perm[pr * grid_n + pc], grid_n)
    src_rows = src_r * ph + ii % ph
    src_cols = src_c * pw + jj % pw
    gt_flow = _pixel_coords(src_rows, src_cols, H, W)
    reference = reference.astype(np.float32)
    target = _warp(reference, gt_flow)
    aux = np.stack([
        (ii % ph) / max(ph - 1, 1),
        (jj % pw) / max(pw - 1, 1),
        ((ii % ph == 0) | (jj % pw == 0)).astype(np.float64),
    ]).astype(np.float32)
    return SyntheticSample(reference, target, np.ones((1, H, W), np.float32), aux, gt_flow,
                           "patch_permutation", seed,
                           {"grid_n": grid_n, "permutation": perm.tolist(), "layout": layout})


def _translated(seed: int, H: int, W: int, shift, canvas_fn, kind: str, meta: dict) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    if shift is None:
        dy = int(rng.integers(-(H // 4), H // 4 + 1))
        dx = int(rng.integers(-(W // 4), W // 4 + 1))
    else:
        dy, dx = (0, int(shift)) if np.isscalar(shift) else (int(shift[0]), int(shift[1]))
    if abs(dy) >= H or abs(dx) >= W:
        raise ParameterError(f"shift {(dy, dx)} leaves no overlap in a {H}x{W} image")
    pad_y, pad_x = abs(dy), abs(dx)
    canvas = canvas_fn(rng, H + 2 * pad_y, W + 2 * pad_x)
    reference = canvas[:, pad_y:pad_y + H, pad_x:pad_x + W].astype(np.float32)
    # target(i, j) shows reference(i - dy, j - dx)
    outside = canvas[:, pad_y - dy:pad_y - dy + H, pad_x - dx:pad_x - dx + W].astype(np.float32)
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    src_r, src_c = ii - dy, jj - dx
    inside = (src_r >= 0) & (src_r < H) & (src_c >= 0) & (src_c < W)
    gt_flow = np.where(inside[..., None], _pixel_coords(src_r, src_c, H, W), _identity_flow(H, W))
    warped = _warp(reference, gt_flow)
    target = np.where(inside[None], warped, outside).astype(np.float32)
    mask = inside[None].astype(np.float32)
    aux = np.stack([_pixel_coords(ii, jj, H, W)[..., 0] * 0.5 + 0.5,
                    _pixel_coords(ii, jj, H, W)[..., 1] * 0.5 + 0.5,
                    np.zeros((H, W))]).astype(np.float32)
    return SyntheticSample(reference, target, mask, aux, gt_flow, kind, seed,
                           dict(meta, shift=[dy, dx]))


def gen_stripes(seed: int, period: int = 4, H: int = 32, W: int = 32, shift=None) -> SyntheticSample:
    """Vertical coloured stripes; the target is the same pattern translated.

    ``shift`` is an int (horizontal) or ``(dy, dx)``; by default it is drawn
    from the seed. Pixels whose source falls outside the reference are
    excluded from the mask (no wrap-around).
    """
    if period < 2:
        raise ParameterError(f"period must be >= 2, got {period}")

    def canvas(rng, h, w):
        palette = [_hsv(rng.uniform(), rng.uniform(0.5, 0.9), rng.uniform(0.5, 0.9)) for _ in range(3)]
        band = (np.arange(w) // max(period // 2, 1)) % len(palette)
        img = np.stack([palette[b] for b in band], axis=1)[:, None, :].repeat(h, axis=1)
        return np.clip(img + rng.uniform(-0.05, 0.05, size=img.shape), 0.0, 1.0)

    return _translated(seed, H, W, shift, canvas, "stripes", {"period": period})


def gen_shift(seed: int, H: int = 32, W: int = 32, shift=None) -> SyntheticSample:
    """Smooth random texture under a seeded translation."""

    def canvas(rng, h, w):
        coarse = rng.uniform(0.1, 0.9, size=(3, h // 4 + 2, w // 4 + 2))
        with precision(np.float32), no_grad():
            from .tensor import bilinear_resize
            smooth = np.array(bilinear_resize(Tensor(coarse), h, w).data, dtype=np.float64)
        return np.clip(smooth + rng.uniform(-0.08, 0.08, size=smooth.shape), 0.0, 1.0)

    return _translated(seed, H, W, shift, canvas, "shift", {})


def gen_tryon_fill(seed: int, H: int = 32, W: int = 32, placement: dict | None = None) -> SyntheticSample:
    """A textured "garment" pasted into a background; the mask marks it.

    The reference shows the garment alone on a neutral background at
    ``scale`` (1 or 2) times the target size and another position. ``aux`` is
    the target with the garment zeroed plus the mask channel.

    ``placement`` keys: ``size`` (gh, gw), ``target_at`` (row, col),
    ``reference_at`` (row, col), ``scale``.
    """
    rng = np.random.default_rng(seed)
    placement = dict(placement or {})
    scale = int(placement.get("scale", rng.integers(1, 3)))
    if scale not in (1, 2):
        raise ParameterError(f"scale must be 1 or 2, got {scale}")
    default_size = (int(rng.integers(H // 4, H // 2 + 1)), int(rng.integers(W // 4, W // 2 + 1)))
    gh, gw = placement.get("size", default_size)
    gh, gw = min(gh, H // scale), min(gw, W // scale)
    ty, tx = placement.get("target_at", (int(rng.integers(0, H - gh + 1)), int(rng.integers(0, W - gw + 1))))
    ry, rx = placement.get("reference_at", (int(rng.integers(0, H - scale * gh + 1)),
                                            int(rng.integers(0, W - scale * gw + 1))))
    if ty + gh > H or tx + gw > W or ry + scale * gh > H or rx + scale * gw > W or min(ty, tx, ry, rx) < 0:
        raise ParameterError("garment placement falls outside the image")

    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    background = np.stack([0.3 + 0.4 * ii / max(H - 1, 1), 0.5 + 0.0 * ii, 0.7 - 0.4 * jj / max(W - 1, 1)])
    background = np.clip(background + rng.uniform(-0.05, 0.05, size=background.shape), 0, 1)

    colors = [_hsv(rng.uniform(), rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.95)) for _ in range(2)]
    sh, sw = scale * gh, scale * gw
    gi, gj = np.meshgrid(np.arange(sh), np.arange(sw), indexing="ij")
    stripe = ((gi // 2 + gj // 3) % 2).astype(bool)
    garment = np.where(stripe[None], colors[0][:, None, None], colors[1][:, None, None])
    garment = np.clip(garment + rng.uniform(-0.1, 0.1, size=garment.shape), 0, 1)
    reference = np.full((3, H, W), 0.85) + rng.uniform(-0.02, 0.02, size=(3, H, W))
    reference[:, ry:ry + sh, rx:rx + sw] = garment
    reference = np.clip(reference, 0, 1).astype(np.float32)

    inside = (ii >= ty) & (ii < ty + gh) & (jj >= tx) & (jj < tx + gw)
    src_r = ry + scale * (ii - ty)
    src_c = rx + scale * (jj - tx)
    gt_flow = np.where(inside[..., None], _pixel_coords(src_r, src_c, H, W), _identity_flow(H, W))
    warped = _warp(reference, gt_flow)
    target = np.where(inside[None], warped, background).astype(np.float32)
    mask = inside[None].astype(np.float32)
    aux = np.concatenate([target * (1.0 - mask), mask]).astype(np.float32)
    meta = {"scale": scale, "size": [gh, gw], "target_at": [ty, tx], "reference_at": [ry, rx]}
    return SyntheticSample(reference, target, mask, aux, gt_flow, "tryon_fill", seed, meta)


def generate(task_kind: str, seed: int, H: int, W: int, **options) -> SyntheticSample:
    if task_kind == "patch_permutation":
        return gen_patch_permutation(seed, options.get("grid_n", 4), H, W, options.get("permutation"),
                                     options.get("layout", "graded"))
    if task_kind == "stripes":
        return gen_stripes(seed, options.get("period", 4), H, W, options.get("shift"))
    if task_kind == "shift":
        return gen_shift(seed, H, W, options.get("shift"))
    if task_kind == "tryon_fill":
        return gen_tryon_fill(seed, H, W, options.get("placement"))
    raise ParameterError(f"unknown task_kind {task_kind!r}; expected one of {TASK_KINDS}")


def sample_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


class SyntheticDataset:
    """Seeded collection of samples that can be rendered at any resolution.

    Stages of a progressive plan render the same seeds at their own size.
    """

    def __init__(self, task_kind: str, count: int, seed: int = 0, options: dict | None = None,
                 seeds: list[int] | None = None):
        if task_kind not in TASK_KINDS:
            raise ParameterError(f"unknown task_kind {task_kind!r}; expected one of {TASK_KINDS}")
        if count < 1:
            raise ParameterError(f"count must be >= 1, got {count}")
        self.task_kind = task_kind
        self.count = count
        self.seed = seed
        self.options = dict(options or {})
        self.seeds = list(seeds) if seeds is not None else [sample_seed(seed, i) for i in range(count)]
        self._cache: dict[tuple[int, int], list[SyntheticSample]] = {}

    def __len__(self) -> int:
        return self.count

    @property
    def aux_channels(self) -> int:
        return aux_channels_for(self.task_kind)

    def render(self, H: int, W: int) -> list[SyntheticSample]:
        key = (H, W)
        if key not in self._cache:
            self._cache[key] = [generate(self.task_kind, s, H, W, **self.options) for s in self.seeds]
        return self._cache[key]

    @classmethod
    def from_manifest(cls, directory: str | os.PathLike) -> "SyntheticDataset":
        rows = _read_manifest(directory)
        kinds = {r["task_kind"] for r in rows}
        if len(kinds) != 1:
            raise ParameterError(f"dataset mixes task kinds {sorted(kinds)}")
        options = rows[0].get("options", {})
        ds = cls(kinds.pop(), len(rows), rows[0].get("dataset_seed", 0), options,
                 seeds=[r["seed"] for r in rows])
        h, w = rows[0]["height"], rows[0]["width"]
        ds._cache[(h, w)] = read_dataset(directory)
        return ds


# -- on-disk datasets ------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def write_dataset(samples: list[SyntheticSample], directory: str | os.PathLike,
                  dataset_seed: int = 0, options: dict | None = None) -> Path:
    """Write PPM/PGM images, LFT1 flow files and a JSON-lines manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        files = {
            "reference": f"{stem}_reference.ppm",
            "target": f"{stem}_target.ppm",
            "mask": f"{stem}_mask.pgm",
            "flow": f"{stem}_flow.lft",
        }
        pnm.write_ppm(s.reference, out / files["reference"])
        pnm.write_ppm(s.target, out / files["target"])
        pnm.write_pgm(s.mask, out / files["mask"])
        checkpoint.save(out / files["flow"], {"gt_flow": s.gt_flow, "aux": s.aux})
        h, w = s.size
        lines.append(json.dumps({"index": i, **files, "task_kind": s.task_kind, "seed": int(s.seed),
                                 "dataset_seed": int(dataset_seed), "height": int(h), "width": int(w),
                                 "options": options or {}}, sort_keys=True))
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out


def _read_manifest(directory) -> list[dict]:
    path = Path(directory) / MANIFEST
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def read_dataset(directory: str | os.PathLike) -> list[SyntheticSample]:
    base = Path(directory)
    samples = []
    for row in _read_manifest(base):
        flow_file = checkpoint.load(base / row["flow"])
        samples.append(SyntheticSample(
            reference=pnm.read_ppm(base / row["reference"]),
            target=pnm.read_ppm(base / row["target"]),
            mask=pnm.read_pgm(base / row["mask"]),
            aux=flow_file["aux"],
            gt_flow=flow_file["gt_flow"],
            task_kind=row["task_kind"],
            seed=row["seed"],
        ))
    return samples
