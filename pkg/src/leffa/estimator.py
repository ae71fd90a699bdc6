"""scikit-learn style wrapper around training and flow prediction."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attention_flow import LeffaConfig
from .diffusion import DiffusionSchedule, add_noise
from .model import DualBranchModel, ModelConfig
from .synthdata import SyntheticDataset, SyntheticSample
from .tensor import DimensionError, ParameterError, constant, no_grad
from .trainer import Batch, EvalReport, Stage, StagePlan, evaluate, train
from .warp import layer_flows, upsample_flow

__all__ = ["LeffaEstimator", "SampleSet", "check_samples", "as_dataset"]

_LEFFA_FIELDS = ("lambda_leffa", "temperature", "theta_resolution", "theta_timestep", "register_count",
                 "average_heads", "upsample_flow", "mask_mode", "loss_reduction")
_MODEL_FIELDS = ("widths", "heads", "time_dim", "freeze_reference")


def check_samples(samples: Sequence[SyntheticSample]) -> list[SyntheticSample]:
    """Reject empty or ragged sample lists and inconsistent per-sample shapes."""
    samples = list(samples)
    if not samples:
        raise ParameterError("no samples given")
    h, w = samples[0].size
    aux = samples[0].aux.shape[0]
    for i, s in enumerate(samples):
        expect = {"reference": (3, h, w), "target": (3, h, w), "mask": (1, h, w),
                  "aux": (aux, h, w), "gt_flow": (h, w, 2)}
        for attr, shape in expect.items():
            got = np.shape(getattr(s, attr))
            if got != shape:
                raise DimensionError(f"sample {i}: {attr} has shape {got}, expected {shape}")
        for attr in ("reference", "target", "mask", "aux", "gt_flow"):
            if not np.all(np.isfinite(getattr(s, attr))):
                raise ParameterError(f"sample {i}: {attr} contains non-finite values")
    return samples


class SampleSet:
    """Fixed samples exposed through the dataset interface the trainer uses."""

    def __init__(self, samples: Sequence[SyntheticSample]):
        self.samples = check_samples(samples)
        self.aux_channels = self.samples[0].aux.shape[0]

    def __len__(self) -> int:
        return len(self.samples)

    def render(self, H: int, W: int) -> list[SyntheticSample]:
        if tuple(self.samples[0].size) != (H, W):
            raise DimensionError(f"fixed samples are {self.samples[0].size}, stage needs {(H, W)}")
        return self.samples


def as_dataset(X):
    if isinstance(X, (SyntheticDataset, SampleSet)):
        return X
    if isinstance(X, SyntheticSample):
        return SampleSet([X])
    return SampleSet(X)


def _samples(X, size=None) -> list[SyntheticSample]:
    if isinstance(X, SyntheticDataset):
        return X.render(*size)
    return as_dataset(X).samples


class LeffaEstimator(BaseEstimator):
    """Train a dual-branch denoiser with the flow regularizer and predict flows.

    ``X`` is a :class:`SyntheticDataset` or a list of samples. ``predict``
    returns the head-averaged flow of one selected attention layer, upsampled
    to image size; ``score`` is the negated mean flow end-point error.
    """

    def __init__(self, lambda_leffa=1e-3, temperature=2.0, theta_resolution=1 / 32, theta_timestep=500,
                 register_count=0, average_heads=True, upsample_flow=True, mask_mode="garment_mask",
                 loss_reduction="mean", widths=(64, 64), heads=4, time_dim=32, freeze_reference=False,
                 height=32, width=32, steps=2000, batch_size=2, learning_rate=1e-3, stages=None,
                 log_every=0, eval_t=100, seed=0):
        self.lambda_leffa = lambda_leffa
        self.temperature = temperature
        self.theta_resolution = theta_resolution
        self.theta_timestep = theta_timestep
        self.register_count = register_count
        self.average_heads = average_heads
        self.upsample_flow = upsample_flow
        self.mask_mode = mask_mode
        self.loss_reduction = loss_reduction
        self.widths = widths
        self.heads = heads
        self.time_dim = time_dim
        self.freeze_reference = freeze_reference
        self.height = height
        self.width = width
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.stages = stages
        self.log_every = log_every
        self.eval_t = eval_t
        self.seed = seed

    def leffa_config(self) -> LeffaConfig:
        return LeffaConfig(**{k: getattr(self, k) for k in _LEFFA_FIELDS})

    def model_config(self, aux_channels: int) -> ModelConfig:
        cfg = ModelConfig(aux_channels=aux_channels, **{k: getattr(self, k) for k in _MODEL_FIELDS})
        cfg.widths = tuple(cfg.widths)
        return cfg

    def stage_plan(self) -> StagePlan:
        if self.stages is not None:
            return StagePlan(list(self.stages)).validate()
        return StagePlan([Stage(self.height, self.width, self.steps, self.batch_size, True,
                                self.learning_rate)]).validate()

    def fit(self, X, y=None, probe=None):
        dataset = as_dataset(X)
        plan = self.stage_plan()
        probe_set = None if probe is None else as_dataset(probe)
        result = train(plan, self.leffa_config(), dataset, seed=self.seed,
                       model_config=self.model_config(dataset.aux_channels), probe=probe_set,
                       log_every=self.log_every, eval_t=self.eval_t)
        self.model_ = result.model
        self.metrics_ = result.metrics
        last = plan.stages[-1]
        self.size_ = (last.height, last.width)
        return self

    def _fitted_samples(self, X) -> list[SyntheticSample]:
        check_is_fitted(self, "model_")
        return _samples(X, self.size_)

    def predict(self, X, layer: int | None = None, batch_size: int = 8) -> np.ndarray:
        """Flow fields ``(N, H, W, 2)`` at the evaluation timestep."""
        samples = self._fitted_samples(X)
        model = self.model_
        layers = model.selected or [0]
        layer = layers[0] if layer is None else layer
        if layer not in range(2):
            raise ParameterError(f"layer must be 0 or 1, got {layer}")
        schedule = DiffusionSchedule()
        rng = np.random.default_rng(0)
        flows = []
        with no_grad():
            for start in range(0, len(samples), batch_size):
                batch = Batch.of(samples[start:start + batch_size])
                n = batch.target.shape[0]
                h, w = batch.target.shape[-2:]
                ts = np.full(n, self.eval_t)
                noise = rng.standard_normal(batch.target.shape).astype(batch.target.dtype)
                z_t = add_noise(constant(batch.target), ts, constant(noise), schedule)
                out = model.forward(z_t, constant(batch.aux), constant(batch.reference), ts)
                flows.append(upsample_flow(layer_flows(out.attention[layer], average=True), h, w).data)
        return np.concatenate(flows)

    def evaluate(self, X) -> EvalReport:
        return evaluate(self.model_, self._fitted_samples(X), t=self.eval_t)

    def score(self, X, y=None) -> float:
        return -self.evaluate(X).mean_epe

    @classmethod
    def from_model(cls, model: DualBranchModel, size=(32, 32), **params) -> "LeffaEstimator":
        """Wrap an existing model, e.g. one restored from a checkpoint."""
        leffa = {k: getattr(model.leffa, k) for k in _LEFFA_FIELDS}
        cfg = {k: getattr(model.config, k) for k in _MODEL_FIELDS}
        est = cls(**{**leffa, **cfg, **params})
        est.model_ = model
        est.metrics_ = []
        est.size_ = tuple(size)
        return est
