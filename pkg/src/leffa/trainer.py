"""Progressive training, evaluation and ablation sweeps at desk scale."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention_flow import AttentionMap, LeffaConfig, average_heads, timestep_in_scope
from .diffusion import DiffusionSchedule, add_noise, combined_loss, diffusion_loss
from .model import DualBranchModel, ModelConfig
from .synthdata import SyntheticDataset, SyntheticSample
from .tensor import (
    ContractError,
    NumericalError,
    ParameterError,
    Tensor,
    backward,
    constant,
    no_grad,
)
from .warp import grid_sample, layer_flows, leffa_term, upsample_flow

log = logging.getLogger(__name__)

__all__ = [
    "Stage",
    "StagePlan",
    "AdamWState",
    "adamw_step",
    "TrainResult",
    "TrainingHalted",
    "train",
    "EvalReport",
    "evaluate",
    "uniform_attention_epe",
    "run_ablation",
    "ABLATION_AXES",
    "METRICS_HEADER",
    "ABLATION_HEADER",
]

METRICS_HEADER = ("step", "loss_diffusion", "loss_leffa", "mean_epe", "warp_psnr")
ABLATION_HEADER = ("axis", "value", "seed", "mean_epe", "warp_psnr")
PSNR_CAP = 99.0


@dataclass
class Stage:
    height: int = 32
    width: int = 32
    steps: int = 2000
    batch_size: int = 2
    leffa_enabled: bool = True
    learning_rate: float = 1e-3


@dataclass
class StagePlan:
    stages: list[Stage] = field(default_factory=list)
    allow_early_leffa: bool = False

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]

    def violations(self) -> list[str]:
        problems = []
        if not self.stages:
            problems.append("empty stage plan")
        for i, s in enumerate(self.stages):
            if s.height < 4 or s.width < 4 or s.height % 4 or s.width % 4:
                problems.append(f"stage {i}: resolution {s.height}x{s.width} must be positive multiples of 4")
            if s.steps < 0:
                problems.append(f"stage {i}: steps must be >= 0")
            if s.batch_size < 1:
                problems.append(f"stage {i}: batch_size must be >= 1")
            if not s.learning_rate > 0:
                problems.append(f"stage {i}: learning_rate must be > 0")
        for i in range(1, len(self.stages)):
            a, b = self.stages[i - 1], self.stages[i]
            if b.height < a.height or b.width < a.width:
                problems.append(f"stage {i}: resolution decreases from {a.height}x{a.width} to {b.height}x{b.width}")
        if not self.allow_early_leffa:
            early = [i for i, s in enumerate(self.stages[:-1]) if s.leffa_enabled]
            if early:
                problems.append(f"leffa enabled before the final stage in stages {early}")
        return problems

    def validate(self) -> "StagePlan":
        problems = self.violations()
        if problems:
            raise ParameterError("; ".join(problems))
        return self


# -- optimizer ----------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float, betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.01,
               eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update with bias-corrected moments and decoupled weight decay.

    Returns new parameter arrays; the inputs are not modified. Raises
    :class:`NumericalError` without touching the state if any gradient is
    non-finite.
    """
    if not lr > 0:
        raise ParameterError(f"lr must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        if m.shape != p.shape:
            raise ContractError(f"optimizer state shape {m.shape} does not match {name} {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        updated[name] = (p * (1.0 - lr * weight_decay) - lr * step).astype(p.dtype)
    return updated, state


# -- batches --------------------------------------------------------------------------


def _stack(samples: Sequence[SyntheticSample], attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples])


@dataclass
class Batch:
    target: np.ndarray
    reference: np.ndarray
    mask: np.ndarray
    aux: np.ndarray
    gt_flow: np.ndarray

    @classmethod
    def of(cls, samples: Sequence[SyntheticSample]) -> "Batch":
        return cls(*(_stack(samples, a) for a in ("target", "reference", "mask", "aux", "gt_flow")))


def _leffa_mask(batch_mask: np.ndarray, config: LeffaConfig) -> np.ndarray:
    return np.ones_like(batch_mask) if config.mask_mode == "all_ones" else batch_mask


def _subset(amap: AttentionMap, idx: np.ndarray) -> AttentionMap:
    return AttentionMap(amap.weights[idx], amap.height, amap.width, amap.registers)


def step_losses(model: DualBranchModel, batch: Batch, t: np.ndarray, noise: np.ndarray,
                schedule: DiffusionSchedule, config: LeffaConfig, leffa_enabled: bool):
    """Forward one batch; returns ``(total, l_diffusion, l_leffa or None)``.

    The flow term covers only the samples whose timestep is in scope and is
    averaged over the full batch. When nothing is in scope it is never built.
    """
    z0 = constant(batch.target)
    eps = constant(noise)
    z_t = add_noise(z0, t, eps, schedule)
    reference = constant(batch.reference)
    out = model.forward(z_t, constant(batch.aux), reference, t)
    l_diff = diffusion_loss(out.noise, eps)
    l_leffa = None
    layers = model.selected
    if leffa_enabled and config.lambda_leffa > 0 and layers:
        idx = np.flatnonzero([timestep_in_scope(int(ti), config.theta_timestep) for ti in t])
        if idx.size:
            maps = [_subset(a, idx) for a in out.attention]
            mask = constant(_leffa_mask(batch.mask, config)[idx])
            term, _ = leffa_term(maps, layers, constant(batch.reference[idx]),
                                 constant(batch.target[idx]), mask, config)
            l_leffa = term * (idx.size / len(t))
    return combined_loss(l_diff, l_leffa, config.lambda_leffa), l_diff, l_leffa


# -- training -------------------------------------------------------------------------


class TrainingHalted(RuntimeError):
    def __init__(self, message: str, state: dict[str, np.ndarray], step: int):
        super().__init__(message)
        self.state = state
        self.step = step


@dataclass
class TrainResult:
    model: DualBranchModel
    metrics: list[dict]
    optimizer: AdamWState

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=METRICS_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in self.metrics:
            writer.writerow({k: _fmt(row[k]) for k in METRICS_HEADER})
        return buf.getvalue()


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def train(plan: StagePlan, leffa: LeffaConfig, dataset: SyntheticDataset, seed: int = 0,
          model_config: ModelConfig | None = None, probe: SyntheticDataset | None = None,
          log_every: int = 0, schedule: DiffusionSchedule | None = None,
          weight_decay: float = 0.01, eval_t: int = 100,
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Train a fresh dual-branch model through every stage of ``plan``.

    Per step: draw a batch and per-sample timesteps uniformly in ``[0, T)``,
    compute the denoising loss, add ``lambda * flow loss`` for in-scope
    samples when the stage enables it, and take an AdamW step. Parameters
    carry over between stages; samples are re-rendered at each stage's
    resolution. Every ``log_every`` steps (and after the last one) a row of
    losses and probe-set metrics is recorded.
    """
    plan.validate()
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    schedule = schedule or DiffusionSchedule()
    model_config = model_config or ModelConfig(aux_channels=dataset.aux_channels)
    model = DualBranchModel(model_config, leffa, seed=seed)
    rng = np.random.default_rng(seed)
    state = AdamWState()
    metrics: list[dict] = []
    trainable = model.trainable()
    global_step = 0
    last_good = model.state_dict()
    for stage in plan.stages:
        samples = dataset.render(stage.height, stage.width)
        probe_samples = probe.render(stage.height, stage.width) if probe is not None else None
        for step in range(stage.steps):
            idx = rng.integers(0, len(samples), size=stage.batch_size)
            t = rng.integers(0, schedule.T, size=stage.batch_size)
            batch = Batch.of([samples[i] for i in idx])
            noise = rng.standard_normal(batch.target.shape).astype(batch.target.dtype)
            loss, l_diff, l_leffa = step_losses(model, batch, t, noise, schedule, leffa, stage.leffa_enabled)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingHalted(f"non-finite loss at step {global_step}", last_good, global_step)
            grads = backward(loss, trainable.values())
            named = {name: grads[id(p)] for name, p in trainable.items()}
            try:
                new, state = adamw_step({k: p.data for k, p in trainable.items()}, named, state,
                                        stage.learning_rate, weight_decay=weight_decay)
            except NumericalError as err:
                raise TrainingHalted(str(err), last_good, global_step) from err
            for name, p in trainable.items():
                p.data = new[name]
                p.data.flags.writeable = False
            global_step += 1
            last_is_due = step == stage.steps - 1
            if log_every and (global_step % log_every == 0 or last_is_due):
                row = {"step": global_step, "loss_diffusion": float(l_diff.data),
                       "loss_leffa": 0.0 if l_leffa is None else float(l_leffa.data),
                       "mean_epe": float("nan"), "warp_psnr": float("nan")}
                if probe_samples is not None:
                    report = evaluate(model, probe_samples, t=eval_t, schedule=schedule)
                    row["mean_epe"], row["warp_psnr"] = report.mean_epe, report.warp_psnr
                metrics.append(row)
                log.info("step %d diff=%.4f leffa=%.4f epe=%.4f psnr=%.2f", global_step,
                         row["loss_diffusion"], row["loss_leffa"], row["mean_epe"], row["warp_psnr"])
                if callback is not None:
                    callback(global_step, row)
                last_good = model.state_dict()
    return TrainResult(model, metrics, state)


# -- evaluation -----------------------------------------------------------------------


@dataclass
class EvalReport:
    mean_epe: float
    warp_psnr: float
    leffa_value: float
    per_layer: list[dict]
    uniform_epe: float
    layers: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def _psnr(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def uniform_attention_epe(samples: Sequence[SyntheticSample]) -> float:
    """EPE of the flow produced by perfectly uniform attention.

    Uniform weights over a symmetric grid put every query at the grid
    centroid, the origin, so the error is the mean ground-truth flow norm
    inside the mask.
    """
    total, count = 0.0, 0.0
    for s in samples:
        m = s.mask[0] > 0
        total += float(np.linalg.norm(s.gt_flow[m].astype(np.float64), axis=-1).sum())
        count += float(m.sum())
    return total / count if count else 0.0


def flow_epe(flow: np.ndarray, gt_flow: np.ndarray, mask: np.ndarray) -> float:
    m = mask[..., 0, :, :] > 0
    err = np.linalg.norm((flow - gt_flow).astype(np.float64), axis=-1)
    return float(err[m].mean()) if m.any() else 0.0


def evaluate(model: DualBranchModel, samples: Sequence[SyntheticSample], t: int = 100,
             schedule: DiffusionSchedule | None = None, noise_seed: int = 0,
             batch_size: int = 8) -> EvalReport:
    """Flow accuracy of every selected attention layer at a fixed timestep.

    Flows come from head-averaged attention, upsampled to image size. EPE is
    the mean flow error over masked pixels (normalized units); PSNR compares
    the warped reference to the target inside the mask, capped at 99 dB.
    """
    if not samples:
        raise ContractError("evaluation needs at least one sample")
    schedule = schedule or DiffusionSchedule()
    layers = model.selected or list(range(len(model.layer_heights(samples[0].size[0]))))
    rng = np.random.default_rng(noise_seed)
    err_sum = np.zeros(len(layers))
    sq_sum = np.zeros(len(layers))
    leffa_sum = 0.0
    pixels = 0.0
    config = model.leffa
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = Batch.of(chunk)
            h, w = batch.target.shape[-2:]
            n = len(chunk)
            ts = np.full(n, t)
            noise = rng.standard_normal(batch.target.shape).astype(batch.target.dtype)
            z_t = add_noise(constant(batch.target), ts, constant(noise), schedule)
            out = model.forward(z_t, constant(batch.aux), constant(batch.reference), ts)
            m = batch.mask[:, 0] > 0
            pixels += float(m.sum())
            reference = constant(batch.reference)
            for li, layer in enumerate(layers):
                flow = upsample_flow(layer_flows(out.attention[layer], average=True), h, w)
                err = np.linalg.norm((flow.data - batch.gt_flow).astype(np.float64), axis=-1)
                err_sum[li] += float(err[m].sum())
                warped = grid_sample(reference, flow).data
                diff = (warped - batch.target).astype(np.float64) ** 2
                sq_sum[li] += float(diff.transpose(0, 2, 3, 1)[m].sum())
            if model.selected:
                term, _ = leffa_term(out.attention, model.selected, reference, constant(batch.target),
                                     constant(_leffa_mask(batch.mask, config)), config)
                leffa_sum += float(term.data) * n
    per_layer = []
    for li, layer in enumerate(layers):
        epe = err_sum[li] / pixels if pixels else 0.0
        mse = sq_sum[li] / (3 * pixels) if pixels else 0.0
        per_layer.append({"layer": layer, "epe": epe, "warp_psnr": _psnr(mse)})
    return EvalReport(
        mean_epe=float(np.mean([p["epe"] for p in per_layer])),
        warp_psnr=float(np.mean([p["warp_psnr"] for p in per_layer])),
        leffa_value=leffa_sum / len(samples),
        per_layer=per_layer,
        uniform_epe=uniform_attention_epe(samples),
        layers=list(layers),
    )


# -- ablations --------------------------------------------------------------------------

ABLATION_AXES = {
    "lambda": "lambda_leffa",
    "theta_resolution": "theta_resolution",
    "theta_timestep": "theta_timestep",
    "tau": "temperature",
    "average_heads": "average_heads",
    "upsample_flow": "upsample_flow",
    "freeze_reference": "freeze_reference",
}


def run_ablation(base, axis: str, values: Sequence, seeds: Sequence[int], X, probe=None,
                 out_path: str | os.PathLike | None = None) -> list[dict]:
    """Train and evaluate one clone of ``base`` per (value, seed).

    ``base`` is a :class:`~leffa.estimator.LeffaEstimator`; each cell is a
    clone with the axis parameter and seed overridden. A failing cell is
    logged and recorded with NaN metrics; remaining cells still run. Writes
    the per-cell CSV to ``out_path`` when given, plus ``<stem>_summary.csv``
    with mean and sample standard deviation per value.
    """
    from sklearn.base import clone

    if axis not in ABLATION_AXES:
        raise ParameterError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    if not seeds:
        raise ParameterError("run_ablation needs at least one seed")
    param = ABLATION_AXES[axis]
    rows = []
    for value in values:
        for seed in seeds:
            est = clone(base).set_params(**{param: value, "seed": seed})
            try:
                est.fit(X, probe=probe)
                report = est.evaluate(probe if probe is not None else X)
                rows.append({"axis": axis, "value": value, "seed": seed,
                             "mean_epe": report.mean_epe, "warp_psnr": report.warp_psnr})
            except Exception as err:  # one bad cell must not sink the sweep
                log.error("ablation cell %s=%r seed=%s failed: %s", axis, value, seed, err)
                rows.append({"axis": axis, "value": value, "seed": seed,
                             "mean_epe": float("nan"), "warp_psnr": float("nan"), "error": str(err)})
    if out_path is not None:
        write_ablation_csv(rows, out_path)
    return rows


def summarize_ablation(rows: Sequence[dict]) -> list[dict]:
    out = []
    for value in dict.fromkeys(_key(r["value"]) for r in rows):
        cell = [r for r in rows if _key(r["value"]) == value]
        epe = np.array([r["mean_epe"] for r in cell], dtype=float)
        psnr = np.array([r["warp_psnr"] for r in cell], dtype=float)
        sd = (lambda a: float(np.std(a, ddof=1)) if len(a) > 1 else 0.0)
        out.append({"axis": cell[0]["axis"], "value": cell[0]["value"], "n": len(cell),
                    "mean_epe": float(np.mean(epe)), "sd_epe": sd(epe),
                    "warp_psnr": float(np.mean(psnr)), "sd_psnr": sd(psnr)})
    return out


def _key(value):
    return repr(value)


def write_ablation_csv(rows: Sequence[dict], out_path: str | os.PathLike) -> None:
    out_path = os.fspath(out_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_HEADER, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({"axis": r["axis"], "value": r["value"], "seed": r["seed"],
                             "mean_epe": _fmt(r["mean_epe"]), "warp_psnr": _fmt(r["warp_psnr"])})
    stem, ext = os.path.splitext(out_path)
    summary = summarize_ablation(rows)
    with open(f"{stem}_summary{ext or '.csv'}", "w", newline="") as fh:
        fields = ("axis", "value", "n", "mean_epe", "sd_epe", "warp_psnr", "sd_psnr")
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in summary:
            writer.writerow(r)
