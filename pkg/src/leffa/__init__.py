"""Attention-derived flow fields, bilinear warping and a flow-warp regularizer.

The package bundles a small numpy autograd engine, a toy dual-branch
denoiser whose cross-branch attention is turned into flow fields, synthetic
correspondence tasks with exact ground-truth flow, and a trainer that
measures how well attention localizes.
"""
from .attention_flow import (
    AttentionMap,
    LeffaConfig,
    RegisterTokens,
    attention,
    attention_to_flow,
    average_heads,
    coordinate_map,
    select_layers,
    timestep_in_scope,
)
from .diffusion import DiffusionSchedule, add_noise, combined_loss, diffusion_loss
from .estimator import LeffaEstimator
from .model import DualBranchModel, ModelConfig
from .synthdata import SyntheticDataset, SyntheticSample, generate
from .tensor import Tensor, backward, no_grad, precision
from .trainer import EvalReport, Stage, StagePlan, evaluate, run_ablation, train
from .warp import grid_sample, leffa_loss, masked_l2, upsample_flow

__version__ = "0.1.0"

__all__ = [
    "AttentionMap", "LeffaConfig", "RegisterTokens", "attention", "attention_to_flow", "average_heads",
    "coordinate_map", "select_layers", "timestep_in_scope", "DiffusionSchedule", "add_noise",
    "combined_loss", "diffusion_loss", "LeffaEstimator", "DualBranchModel", "ModelConfig",
    "SyntheticDataset", "SyntheticSample", "generate", "Tensor", "backward", "no_grad", "precision",
    "EvalReport", "Stage", "StagePlan", "evaluate", "run_ablation", "train", "grid_sample", "leffa_loss",
    "masked_l2", "upsample_flow",
]
