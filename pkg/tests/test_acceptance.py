"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that pytest prints in an "acceptance
criteria" section at the end of the run. The flow-accuracy criteria (5, 6)
reuse cached training runs from ``experiments.py``.
"""
import time

import numpy as np
import pytest

from leffa import checkpoint, pnm
from leffa.attention_flow import AttentionMap, LeffaConfig, attention_to_flow, coordinate_map
from leffa.cli import main
from leffa.gradcheck import TOLERANCE, run_suite
from leffa.model import DualBranchModel, ModelConfig
from leffa.synthdata import SyntheticDataset
from leffa.tensor import Tensor, constant, softmax
from leffa.trainer import Stage, StagePlan, train
from leffa.warp import grid_sample

import experiments
from test_warp import brute_force_sample

# Regression pins for criterion 5, taken from the first verified 3-seed run
# of experiments.py; later runs must stay within 10% of them.
PINNED_FULL_EPE = 0.3123
PINNED_BASELINE_EPE = 0.7898
REGRESSION_SLACK = 1.10
RUN_BUDGET_SECONDS = 15 * 60


def test_criterion_1_gradient_suite(record):
    start = time.perf_counter()
    results = run_suite(seed=0, cases=20)
    seconds = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r.op for r in results if not r.ok]
    ok = not failed and seconds <= 60 and all(r.cases >= 20 for r in results)
    record(1, ok, f"{len(results)} ops x 20 cases, worst {worst.op} {worst.max_rel_error:.2e} "
                  f"(tol {TOLERANCE:g}), {seconds:.1f}s (limit 60s){'; failed ' + ', '.join(failed) if failed else ''}")
    assert ok


def test_criterion_2_warp_oracle(record):
    worst = 0.0
    for case in range(100):
        rng = np.random.default_rng([2, case])
        image = rng.uniform(size=(3, 8, 8)).astype(np.float32)
        flow = rng.uniform(-1, 1, size=(8, 8, 2)).astype(np.float32)
        worst = max(worst, float(np.abs(grid_sample(Tensor(image), Tensor(flow)).data
                                        - brute_force_sample(image, flow)).max()))
    identity = True
    for size in ((8, 8), (32, 32), (17, 9)):
        image = np.random.default_rng(size).uniform(size=(3, *size)).astype(np.float32)
        identity &= bool(np.array_equal(grid_sample(Tensor(image), coordinate_map(*size)).data, image))
    ok = worst <= 1e-6 and identity
    record(2, ok, f"max |vectorized - scalar| over 100 cases {worst:.2e} (tol 1e-6); "
                  f"identity warp bit-exact: {identity}")
    assert ok


def test_criterion_3_flow_exactness(record):
    rng = np.random.default_rng(3)
    one_hot_exact = True
    for h, w in ((2, 2), (3, 4), (4, 4)):
        n = h * w
        perm = rng.permutation(n)
        coords = coordinate_map(h, w)
        flow = attention_to_flow(Tensor(np.eye(n)[perm]), coords).data
        one_hot_exact &= bool(np.array_equal(flow.reshape(n, 2), coords.data.reshape(n, 2)[perm]))
    uniform_max = 0.0
    for h, w in ((2, 2), (3, 3), (4, 4), (8, 8), (5, 7)):
        n = h * w
        uniform_max = max(uniform_max, float(np.abs(
            attention_to_flow(Tensor(np.full((n, n), 1.0 / n)), coordinate_map(h, w)).data).max()))
    bound_max = 0.0
    for i in range(1000):
        registers = i % 2 * int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(1, 7, size=2))
        a = rng.uniform(size=(h * w, h * w + registers)) ** int(rng.integers(1, 6))
        a /= a.sum(-1, keepdims=True)
        bound_max = max(bound_max, float(np.abs(
            attention_to_flow(Tensor(a), coordinate_map(h, w), registers).data).max()))
    ok = one_hot_exact and uniform_max <= 1e-6 and bound_max <= 1.0
    record(3, ok, f"one-hot exact: {one_hot_exact}; uniform |flow| max {uniform_max:.1e}; "
                  f"max |flow| over 1000 random maps {bound_max:.4f} (<= 1)")
    assert ok


def test_criterion_4_gating_exactness(record, tmp_path):
    data = SyntheticDataset("patch_permutation", 8, seed=0)
    plan = StagePlan([Stage(32, 32, 10)])
    gated = train(plan, LeffaConfig(theta_timestep=0), data, seed=7, log_every=1)
    off = train(plan, LeffaConfig(lambda_leffa=0.0), data, seed=7, log_every=1)
    checkpoint.save(tmp_path / "gated.lft", gated.model.state_dict())
    checkpoint.save(tmp_path / "off.lft", off.model.state_dict())
    same_losses = gated.metrics_csv() == off.metrics_csv()
    same_weights = (tmp_path / "gated.lft").read_bytes() == (tmp_path / "off.lft").read_bytes()
    ok = same_losses and same_weights
    record(4, ok, f"10 steps at 32x32: identical loss logs {same_losses}, byte-identical checkpoints {same_weights}")
    assert ok


@pytest.fixture(scope="module")
def runs():
    return experiments.run_all()


def _mean(rows, key="mean_epe"):
    return float(np.mean([r[key] for r in rows]))


@pytest.mark.slow
def test_criterion_5_flow_regularizer_effect(record, runs):
    full, base = _mean(runs["full"]), _mean(runs["baseline"])
    uniform = runs["full"][0]["uniform_epe"]
    slowest = max(r["cpu_seconds"] for rows in (runs["full"], runs["baseline"]) for r in rows)
    ratio = full / base
    checks = [ratio <= 0.5, full < uniform, slowest <= RUN_BUDGET_SECONDS]
    pins = ""
    if PINNED_FULL_EPE is not None:
        checks.append(full <= PINNED_FULL_EPE * REGRESSION_SLACK)
        checks.append(base >= PINNED_BASELINE_EPE / REGRESSION_SLACK)
        pins = f"; pinned full {PINNED_FULL_EPE:.4f}, baseline {PINNED_BASELINE_EPE:.4f}"
    ok = all(checks)
    per_seed = ", ".join(f"{r['mean_epe']:.3f}" for r in runs["full"])
    record(5, ok, f"3-seed EPE full {full:.4f} [{per_seed}] vs baseline {base:.4f}: ratio {ratio:.3f} (<= 0.5); "
                  f"uniform-attention EPE {uniform:.4f}; slowest run {slowest:.0f}s CPU{pins}")
    assert ok


@pytest.mark.slow
def test_criterion_6_ablation_directions(record, runs):
    full = _mean(runs["full"])
    parts, ok = [], True
    for name in ("no_head_average", "no_upsample", "frozen_reference"):
        value = _mean(runs[name])
        ok &= value >= full
        parts.append(f"{name} {value:.4f}")
    record(6, ok, f"3-seed EPE full {full:.4f}; " + ", ".join(parts) + " (each must be >= full)")
    assert ok


def test_criterion_7_format_round_trips(record, tmp_path):
    rng = np.random.default_rng(7)
    image = rng.uniform(size=(3, 5, 7))
    pnm.write_ppm(image, tmp_path / "a.ppm")
    ppm_err = float(np.abs(pnm.read_ppm(tmp_path / "a.ppm") - image).max())
    gray = rng.uniform(size=(1, 4, 6))
    pnm.write_pgm(gray, tmp_path / "a.pgm")
    pgm_err = float(np.abs(pnm.read_pgm(tmp_path / "a.pgm") - gray).max())
    quantized = np.round(image * 255) / 255
    pnm.write_ppm(quantized, tmp_path / "q.ppm")
    requantized = bool(np.array_equal(pnm.read_ppm(tmp_path / "q.ppm"), quantized.astype(np.float32)))
    tensors = {"w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
               "d": rng.standard_normal(5).astype(np.float32), "s": np.ones((), np.float32) * np.float32(2.5)}
    checkpoint.save(tmp_path / "c.lft", tensors)
    back = checkpoint.load(tmp_path / "c.lft")
    lft_exact = set(back) == set(tensors) and all(
        back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k]) for k in tensors)
    outs = []
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "3"]) == 0
        outs.append({p.name: p.read_bytes() for p in (tmp_path / name).iterdir()})
    gen_identical = outs[0] == outs[1]
    half_step = 0.5 / 255 + 1e-7
    ok = ppm_err <= half_step and pgm_err <= half_step and requantized and lft_exact and gen_identical
    record(7, ok, f"PPM err {ppm_err:.2e}, PGM err {pgm_err:.2e} (<= half 8-bit step); quantized PPM exact "
                  f"{requantized}; LFT1 exact {lft_exact}; gen-data byte-identical {gen_identical}")
    assert ok


def test_criterion_8_softmax_invariants(record):
    rng = np.random.default_rng(8)
    worst_sum = 0.0
    for seed, registers in ((0, 0), (1, 2), (2, 4)):
        model = DualBranchModel(ModelConfig(widths=(32, 32), heads=4), LeffaConfig(register_count=registers),
                                seed=seed)
        z = constant(rng.standard_normal((2, 3, 32, 32)))
        aux = constant(rng.uniform(size=(2, 3, 32, 32)))
        ref = constant(rng.uniform(size=(2, 3, 32, 32)))
        out = model(z, aux, ref, rng.integers(0, 1000, size=2))
        for amap in out.attention:
            worst_sum = max(worst_sum, float(np.abs(amap.weights.data.sum(-1) - 1).max()))
    taus = (0.1, 0.5, 1.0, 2.0, 5.0)
    monotone = True
    for _ in range(100):
        row = constant(rng.standard_normal(int(rng.integers(2, 40))) * rng.uniform(0.1, 10))
        peaks = [float(softmax(row, tau).data.max()) for tau in taus]
        monotone &= all(a >= b for a, b in zip(peaks, peaks[1:]))
    ok = worst_sum <= 1e-5 and monotone
    record(8, ok, f"max |row sum - 1| over all attention layers {worst_sum:.1e} (tol 1e-5); "
                  f"row max non-increasing in tau on 100 rows: {monotone}")
    assert ok
