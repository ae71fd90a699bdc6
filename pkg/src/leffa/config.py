"""JSON run configuration: validation and default materialization."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Any

from .attention_flow import LeffaConfig
from .synthdata import TASK_KINDS

__all__ = ["ConfigError", "DEFAULTS", "resolve", "load", "dump"]


class ConfigError(ValueError):
    """Raised with every violation found, one per line."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


_LEFFA_KEYS = [f.name for f in fields(LeffaConfig) if f.name != "register_count"]

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {"task_kind": "patch_permutation", "sizes": [32, 32], "count": 64, "seed": 0, "options": {}},
    "model": {"widths": [64, 64], "heads": 4, "time_dim": 32, "registers": 0, "freeze_reference": False},
    "leffa": {k: getattr(LeffaConfig(), k) for k in _LEFFA_KEYS},
    "stages": [{"height": 32, "width": 32, "steps": 2000, "batch_size": 2, "leffa_enabled": True,
                "learning_rate": 1e-3}],
    "eval": {"probe_t": 100, "probe_count": 32, "probe_seed": 10_000, "log_every": 100},
    "output_dir": "runs/default",
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_keys(section: dict, allowed, where: str, problems: list[str]) -> None:
    for key in section:
        if key not in allowed:
            problems.append(f"{where}.{key}: unknown key" if where else f"{key}: unknown key")


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "options":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(raw: dict) -> dict:
    """Validate ``raw`` and return it with every default filled in.

    Unknown keys are rejected. All problems are collected and raised together
    as a :class:`ConfigError`.
    """
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    _check_keys(raw, DEFAULTS, "", problems)
    given = {}
    for key, value in raw.items():
        if key not in DEFAULTS or key == "stages":
            continue
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                problems.append(f"{key}: must be an object")
                continue
            _check_keys(value, DEFAULTS[key], key, problems)
            value = {k: v for k, v in value.items() if k in DEFAULTS[key]}
        given[key] = value
    stages_raw = raw.get("stages", DEFAULTS["stages"])
    if not isinstance(stages_raw, list):
        problems.append("stages: must be a list")
        stages_raw = []
    stage_keys = DEFAULTS["stages"][0]
    stages = []
    for i, stage in enumerate(stages_raw):
        if not isinstance(stage, dict):
            problems.append(f"stages[{i}]: must be an object")
            continue
        _check_keys(stage, stage_keys, f"stages[{i}]", problems)
        stages.append(_merge(stage_keys, {k: v for k, v in stage.items() if k in stage_keys}))

    cfg = _merge({k: v for k, v in DEFAULTS.items() if k != "stages"}, given)
    cfg["stages"] = stages
    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate(cfg: dict, problems: list[str]) -> None:
    from .model import ModelConfig
    from .trainer import Stage, StagePlan

    if not _is_int(cfg["seed"]) or cfg["seed"] < 0:
        problems.append("seed: must be a non-negative integer")
    data = cfg["data"]
    if data["task_kind"] not in TASK_KINDS:
        problems.append(f"data.task_kind: must be one of {list(TASK_KINDS)}, got {data['task_kind']!r}")
    sizes = data["sizes"]
    if not (isinstance(sizes, list) and len(sizes) == 2 and all(_is_int(s) and s >= 4 and s % 4 == 0
                                                                 for s in sizes)):
        problems.append(f"data.sizes: must be [height, width], positive multiples of 4, got {sizes!r}")
    if not _is_int(data["count"]) or data["count"] < 1:
        problems.append("data.count: must be an integer >= 1")
    if not _is_int(data["seed"]) or data["seed"] < 0:
        problems.append("data.seed: must be a non-negative integer")
    if not isinstance(data["options"], dict):
        problems.append("data.options: must be an object")

    model = cfg["model"]
    widths = model["widths"]
    if not (isinstance(widths, list) and all(_is_int(w) for w in widths)):
        problems.append(f"model.widths: must be a list of integers, got {widths!r}")
    elif not (_is_int(model["heads"]) and _is_int(model["time_dim"])):
        problems.append("model.heads and model.time_dim: must be integers")
    else:
        mc = ModelConfig(widths=tuple(widths), heads=model["heads"], time_dim=model["time_dim"])
        problems.extend(f"model.{p}" for p in mc.violations())
    if not _is_int(model["registers"]) or model["registers"] < 0:
        problems.append("model.registers: must be a non-negative integer")
    if not isinstance(model["freeze_reference"], bool):
        problems.append("model.freeze_reference: must be true or false")

    leffa = cfg["leffa"]
    for key in ("average_heads", "upsample_flow"):
        if not isinstance(leffa[key], bool):
            problems.append(f"leffa.{key}: must be true or false")
    for key in ("lambda_leffa", "temperature", "theta_resolution"):
        if not _is_num(leffa[key]):
            problems.append(f"leffa.{key}: must be a number")
    if not _is_int(leffa["theta_timestep"]):
        problems.append("leffa.theta_timestep: must be an integer")
    if not any(p.startswith("leffa.") for p in problems):
        probe = LeffaConfig.__new__(LeffaConfig)
        for key in _LEFFA_KEYS:
            setattr(probe, key, leffa[key])
        probe.register_count = max(model["registers"], 0) if _is_int(model["registers"]) else 0
        problems.extend(f"leffa.{p}" for p in probe.violations())

    plan_ok = True
    for i, stage in enumerate(cfg["stages"]):
        for key in ("height", "width", "steps", "batch_size"):
            if not _is_int(stage[key]):
                problems.append(f"stages[{i}].{key}: must be an integer")
                plan_ok = False
        if not isinstance(stage["leffa_enabled"], bool):
            problems.append(f"stages[{i}].leffa_enabled: must be true or false")
            plan_ok = False
        if not _is_num(stage["learning_rate"]):
            problems.append(f"stages[{i}].learning_rate: must be a number")
            plan_ok = False
    if plan_ok:
        plan = StagePlan([Stage(**s) for s in cfg["stages"]])
        problems.extend(f"stages: {p}" for p in plan.violations())

    ev = cfg["eval"]
    if not _is_int(ev["probe_t"]) or not 0 <= ev["probe_t"] < 1000:
        problems.append("eval.probe_t: must be an integer in [0, 1000)")
    for key in ("probe_count", "log_every"):
        if not _is_int(ev[key]) or ev[key] < (1 if key == "probe_count" else 0):
            problems.append(f"eval.{key}: must be a {'positive' if key == 'probe_count' else 'non-negative'} integer")
    if not _is_int(ev["probe_seed"]) or ev["probe_seed"] < 0:
        problems.append("eval.probe_seed: must be a non-negative integer")
    elif _is_int(data["seed"]) and ev["probe_seed"] == data["seed"]:
        problems.append("eval.probe_seed: must differ from data.seed so probe samples stay disjoint")
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        problems.append("output_dir: must be a non-empty string")


def load(path: str | os.PathLike) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError([f"{path}: invalid JSON ({err})"]) from err
    return resolve(raw)


def dump(cfg: dict, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# -- builders ----------------------------------------------------------------------


def leffa_config(cfg: dict) -> LeffaConfig:
    return LeffaConfig(register_count=cfg["model"]["registers"], **cfg["leffa"])


def model_config(cfg: dict, aux_channels: int):
    from .model import ModelConfig

    m = cfg["model"]
    return ModelConfig(aux_channels=aux_channels, widths=tuple(m["widths"]), heads=m["heads"],
                       time_dim=m["time_dim"], freeze_reference=m["freeze_reference"])


def stage_plan(cfg: dict):
    from .trainer import Stage, StagePlan

    return StagePlan([Stage(**s) for s in cfg["stages"]]).validate()


def probe_dataset(cfg: dict, task_kind: str | None = None, options: dict | None = None):
    from .synthdata import SyntheticDataset

    data = cfg["data"]
    return SyntheticDataset(task_kind or data["task_kind"], cfg["eval"]["probe_count"],
                            cfg["eval"]["probe_seed"], data["options"] if options is None else options)
