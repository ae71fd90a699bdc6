"""``leffa`` command-line entry point.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error,
3 numerical failure (non-finite training values or a failed gradient check).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config as runconfig, pnm
from .model import ConfigurationError, DualBranchModel
from .synthdata import SyntheticDataset, read_dataset, write_dataset
from .tensor import ContractError, DimensionError, NumericalError, ParameterError

log = logging.getLogger("leffa")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2, 3
CHECKPOINT_NAME = "model.lft"
LAST_GOOD_NAME = "last_good.lft"
CONFIG_NAME = "config.json"


class UsageError(Exception):
    pass


def _threads():
    """Cap BLAS/OpenMP pools to ``LEFFA_THREADS`` when set."""
    value = os.environ.get("LEFFA_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"LEFFA_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_config(path) -> dict:
    if path is None:
        return runconfig.resolve({})
    return runconfig.load(path)


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    data = cfg["data"]
    seed = data["seed"] if args.seed is None else args.seed
    ds = SyntheticDataset(data["task_kind"], data["count"], seed, data["options"])
    h, w = data["sizes"]
    out = write_dataset(ds.render(h, w), args.out, seed, data["options"])
    print(f"wrote {data['count']} {data['task_kind']} samples at {h}x{w} to {out}")
    return EXIT_OK


def _model_from_config(cfg: dict, aux_channels: int, seed: int = 0) -> DualBranchModel:
    return DualBranchModel(runconfig.model_config(cfg, aux_channels), runconfig.leffa_config(cfg), seed=seed)


def restore_model(path) -> tuple[DualBranchModel, dict]:
    """Rebuild a model from an LFT1 checkpoint.

    Settings come from ``config.json`` next to the checkpoint when present;
    otherwise widths, time embedding size, input channels and register count
    are read off the tensor shapes and everything else (notably the head
    count, which shapes cannot reveal) takes its default.
    """
    path = Path(path)
    state = checkpoint.load(path)
    cfg_path = path.parent / CONFIG_NAME
    if cfg_path.exists():
        cfg = runconfig.load(cfg_path)
    else:
        cfg = runconfig.resolve({})
        try:
            cfg["model"]["widths"] = [int(state["gen.stem.w"].shape[0]), int(state["gen.down2.w"].shape[0])]
            cfg["model"]["time_dim"] = int(state["gen.time.w"].shape[0])
        except KeyError as err:
            raise ConfigurationError(f"checkpoint lacks {err.args[0]}") from None
        regs = [k for k in state if k.startswith("reg.") and k.endswith(".keys")]
        cfg["model"]["registers"] = int(state[regs[0]].shape[0]) if regs else 0
    if "gen.stem.w" not in state:
        raise ConfigurationError("checkpoint lacks gen.stem.w")
    aux = int(state["gen.stem.w"].shape[1]) - 3
    model = _model_from_config(cfg, aux)
    model.load_state_dict(state)
    return model, cfg


def cmd_train(args) -> int:
    from .trainer import TrainingHalted, train

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out)
    cfg["output_dir"] = str(out)
    dataset = SyntheticDataset.from_manifest(args.data)
    plan = runconfig.stage_plan(cfg)
    probe = runconfig.probe_dataset(cfg, dataset.task_kind, dataset.options)
    out.mkdir(parents=True, exist_ok=True)
    runconfig.dump(cfg, out / CONFIG_NAME)
    model_cfg = runconfig.model_config(cfg, dataset.aux_channels)
    try:
        result = train(plan, runconfig.leffa_config(cfg), dataset, seed=cfg["seed"], model_config=model_cfg,
                       probe=probe, log_every=cfg["eval"]["log_every"], eval_t=cfg["eval"]["probe_t"])
    except TrainingHalted as halt:
        checkpoint.save(out / LAST_GOOD_NAME, halt.state)
        print(f"training halted at step {halt.step}: {halt}; last good weights in {out / LAST_GOOD_NAME}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    (out / "metrics.csv").write_text(result.metrics_csv())
    checkpoint.save(out / CHECKPOINT_NAME, result.model.state_dict())
    print(f"trained {sum(s.steps for s in plan.stages)} steps; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate

    model, cfg = restore_model(args.checkpoint)
    samples = read_dataset(args.data)
    if not samples:
        raise ParameterError(f"dataset {args.data} is empty")
    if samples[0].aux.shape[0] != model.config.aux_channels:
        raise ConfigurationError(f"dataset has {samples[0].aux.shape[0]} aux channels, model expects "
                                 f"{model.config.aux_channels}")
    t = cfg["eval"]["probe_t"] if args.t is None else args.t
    report = evaluate(model, samples, t=t)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_suite

    results = run_suite(seed=args.seed, cases=args.cases)
    print(format_table(results))
    failed = [r.op for r in results if not r.ok]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_visualize(args) -> int:
    from .diffusion import DiffusionSchedule, add_noise
    from .tensor import constant, no_grad
    from .visualize import render_layers

    model, cfg = restore_model(args.checkpoint)
    samples = read_dataset(args.sample)
    if not 0 <= args.index < len(samples):
        raise ParameterError(f"sample index {args.index} outside [0, {len(samples)})")
    s = samples[args.index]
    H, W = s.size
    query = tuple(args.query) if args.query else (H // 2, W // 2)
    t = cfg["eval"]["probe_t"] if args.t is None else args.t
    noise = np.random.default_rng(0).standard_normal(s.target.shape).astype(s.target.dtype)
    with no_grad():
        z_t = add_noise(constant(s.target[None]), np.array([t]), constant(noise[None]), DiffusionSchedule())
        out = model.forward(z_t, constant(s.aux[None]), constant(s.reference[None]), np.array([t]))
    layers = model.selected or [0, 1]
    written = render_layers(out.attention, layers, s.reference, query, args.out)
    for p in written:
        print(p)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leffa", description="Attention flow-field regularizer toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic correspondence dataset")
    p.add_argument("--config", help="run config JSON (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", help="run config JSON (defaults when omitted)")
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate flow accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--t", type=int, help="evaluation timestep (default eval.probe_t)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="write attention, flow and warp images per layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="dataset directory")
    p.add_argument("--index", type=int, default=0, help="sample index within the dataset")
    p.add_argument("--query", type=int, nargs=2, metavar=("ROW", "COL"), help="query pixel (default centre)")
    p.add_argument("--t", type=int, help="timestep (default eval.probe_t)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.func(args)
    except runconfig.ConfigError as err:
        print("invalid configuration:", file=sys.stderr)
        for problem in err.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ParameterError, ConfigurationError, DimensionError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, checkpoint.FormatError, pnm.FormatError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
