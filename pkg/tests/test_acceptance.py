"""Acceptance criteria 1 to 10, one test each.

Every test records a PASS/FAIL line that the terminal summary prints under
"acceptance criteria".
"""

import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from oracles import asian_n2_oracle, bs_call, bs_delta
from pathhedge.cli import main
from pathhedge.functional import asian_call_functional, ftvp_residual, functional_hedge_check
from pathhedge.hedge import NO_ARBITRAGE_FOUND, no_arbitrage_probe, robustness_sweep, run_hedge
from pathhedge.lattice import GridSpec, LocalVolModel, maximum_principle_check, solve_tvp
from pathhedge.pathcalc import Flavor, basic_strategy, follmer_integral, ito_identity_rhs
from pathhedge.paths import PathGeneratorSpec, generate_paths
from pathhedge.payoff import PayoffSpec
from pathhedge.scheme import FixingSchedule, build_scheme

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
HEAT = LocalVolModel.constant([[2.0]])
CALL = PayoffSpec.parse("(call x1 100)", 1)


def test_c01_discrete_ito_identity(bm2_model):
    start = time.perf_counter()
    paths = generate_paths(PathGeneratorSpec(bm2_model, (0.3, -0.2), 1.0, 14, seed=101, count=100))
    cases = [(i, j, K) for i, j in ((0, 0), (1, 1), (0, 1), (1, 0)) for K in (-1.0, 0.0, 0.5, 2.0)]
    worst = 0.0
    for p in paths:
        for level in (10, 12, 14):
            for i, j, K in cases:
                lhs = follmer_integral(basic_strategy(i, j, K, 2), p, level).values
                rhs = ito_identity_rhs(p, i, j, K, level)
                worst = max(worst, float(np.max(np.abs(lhs - rhs))) / max(1.0, np.max(np.abs(rhs))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed <= 10
    record(1, "discrete Ito identity", ok,
           f"worst rel error {worst:.2e} (<= 1e-10) over 100 paths x 3 levels x {len(cases)} "
           f"cases, {elapsed:.1f} s (<= 10 s)")
    assert ok


def test_c02_heat_oracle():
    start = time.perf_counter()
    grid = GridSpec(((-10.0, 10.0),), 801, n_time=800)
    sol = solve_tvp(HEAT, lambda x: x[..., 0] ** 2, 0.0, 0.5, grid)
    x = sol.axes[0]
    inner = np.abs(x) <= 5.0
    err = float(np.max(np.abs(sol.values[0][inner] - (x[inner] ** 2 + 1.0))))
    # order from a smooth terminal whose exact solution is exp(-(T - t)) cos x
    probe = np.linspace(-5, 5, 41)[:, None]
    exact = math.exp(-0.5) * np.cos(probe[:, 0])
    errs = []
    for n in (401, 801, 1601):
        s = solve_tvp(HEAT, lambda y: np.cos(y[..., 0]), 0.0, 0.5,
                      GridSpec(((-10.0, 10.0),), n, 2 * (n - 1)))
        errs.append(float(np.max(np.abs(s.value(0.0, probe) - exact))))
    order = math.log2(errs[1] / errs[2])
    elapsed = time.perf_counter() - start
    ok = err <= 1e-3 and 1.8 <= order <= 2.2 and elapsed <= 5
    record(2, "heat-equation oracle", ok,
           f"max error {err:.2e} (<= 1e-3) on |x| <= 5, Richardson order {order:.3f} "
           f"(in [1.8, 2.2]), {elapsed:.1f} s (<= 5 s)")
    assert ok


def test_c03_black_scholes(bs_model):
    start = time.perf_counter()
    root = build_scheme(bs_model, FixingSchedule((0.0, 1.0), 14), CALL, [100.0])
    ref = bs_call(100, 100, 0.2, 1.0)
    rel = abs(root.price() - ref) / ref
    derr = abs(root.delta(0.0, np.array([[100.0]]))[0, 0] - bs_delta(100, 100, 0.2, 1.0))
    elapsed = time.perf_counter() - start
    ok = rel <= 2e-3 and derr <= 5e-3 and elapsed <= 5
    record(3, "Black-Scholes oracle", ok,
           f"price rel error {rel:.2e} (<= 2e-3), delta error {derr:.2e} (<= 5e-3), "
           f"{elapsed:.1f} s (<= 5 s)")
    assert ok


def test_c04_recursive_scheme(bs_model):
    start = time.perf_counter()
    halves = FixingSchedule.uniform(2, 1.0, 14)
    spot = build_scheme(bs_model, halves, PayoffSpec.parse("x2", 2), [100.0]).price()
    mart = abs(spot - 100.0) / 100.0
    asian = build_scheme(bs_model, halves, PayoffSpec.parse("(call (avg x1 x2) 100)", 2),
                         [100.0]).price()
    oracle = asian_n2_oracle()
    gap = abs(asian - oracle["price"])
    band = 3 * oracle["std_error"] + 3e-3 * oracle["price"]
    elapsed = time.perf_counter() - start
    ok = mart <= 2e-3 and gap <= band and elapsed <= 120
    record(4, "recursive-scheme martingale", ok,
           f"|v0 - 100|/100 = {mart:.2e} (<= 2e-3), Asian {asian:.5f} vs MC {oracle['price']:.5f} "
           f"gap {gap:.4f} (<= {band:.4f}), {elapsed:.1f} s (<= 120 s)")
    assert ok


def test_c05_hedging_replication(bs_model):
    start = time.perf_counter()
    schedule = FixingSchedule((0.0, 1.0), 14)
    root = build_scheme(bs_model, schedule, CALL, [100.0])
    paths = generate_paths(PathGeneratorSpec(bs_model, (100.0,), 1.0, 14, seed=42, count=200))
    medians = {}
    for level in (10, 12, 14):
        errs = [abs(run_hedge(p, schedule, CALL, bs_model, level, root).error) for p in paths]
        medians[level] = float(np.median(errs))
    elapsed = time.perf_counter() - start
    ok = medians[14] <= 1.0 and medians[14] < medians[12] < medians[10] and elapsed <= 120
    record(5, "hedging replication", ok,
           "median |V(T) - h| " + ", ".join(f"L{k} {v:.4f}" for k, v in medians.items())
           + f" (L14 <= 1.0 and decreasing), {elapsed:.1f} s (<= 120 s)")
    assert ok


def test_c06_robustness_sign(bs_model):
    start = time.perf_counter()
    lo, hi = robustness_sweep([("call", CALL)], [0.64, 1.44], bs_model,
                              FixingSchedule((0.0, 1.0), 12), 100.0, n_paths=200, seed=7)
    elapsed = time.perf_counter() - start
    ok = lo.shortfall_freq <= 0.01 and hi.shortfall_freq > lo.shortfall_freq and elapsed <= 120
    record(6, "robustness sign", ok,
           f"shortfall freq kappa 0.64: {lo.shortfall_freq:.3f} (<= 0.01), kappa 1.44: "
           f"{hi.shortfall_freq:.3f} (> kappa 0.64), {elapsed:.1f} s (<= 120 s)")
    assert ok


def test_c07_maximum_principle():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    n = 201
    grid = GridSpec(((-8.0, 8.0),), n)
    x = np.linspace(-8.0, 8.0, n)
    worst, fails = np.inf, 0
    for case in range(50):
        kind = case % 3
        if kind == 0:  # sparse spikes
            f = np.abs(rng.standard_normal(n)) * (rng.uniform(size=n) < 0.2)
        elif kind == 1:  # random hinge combinations
            f = sum(rng.uniform(0, 2) * np.maximum(rng.choice([-1, 1]) * (x - rng.uniform(-4, 4)), 0)
                    for _ in range(3))
        else:  # rough nonnegative noise
            f = rng.uniform(0, 1, n) ** 4
        model = LocalVolModel.constant([[rng.uniform(0.1, 3.0)]])
        rep = maximum_principle_check(model, None, 0.0, float(rng.uniform(0.1, 1.0)), grid,
                                      terminal_values=f)
        fails += not rep.passed
        worst = min(worst, rep.min_value / max(rep.tolerance / 1e-8, 1e-300))
    bump = lambda y: np.maximum(0.0, 1 - np.abs(y[..., 0]))  # noqa: E731
    pos = maximum_principle_check(HEAT, bump, 0.0, 1.0, GridSpec(((-8.0, 8.0),), 401))
    elapsed = time.perf_counter() - start
    ok = fails == 0 and pos.positivity_checked and pos.positivity_passed and elapsed <= 30
    record(7, "maximum principle", ok,
           f"{50 - fails}/50 random terminals with min v >= -1e-8 |f| (worst min v/|f| "
           f"{worst:.1e}), bump min v(0) {pos.min_interior_initial:.1e} (> 0), "
           f"{elapsed:.1f} s (<= 30 s)")
    assert ok


def test_c08_no_arbitrage_probe(bs_model):
    start = time.perf_counter()
    short = FixingSchedule((0.0, 0.25), 10)
    paths = generate_paths(PathGeneratorSpec(bs_model, (100.0,), 0.25, 10, seed=3, count=500))
    far = build_scheme(bs_model, short, PayoffSpec.parse("(call x1 300)", 1), [100.0])
    v = no_arbitrage_probe(far, paths)
    zero = build_scheme(bs_model, short, PayoffSpec.parse("0", 1), [100.0])
    z = no_arbitrage_probe(zero, paths)
    zmax = max(abs(z.sup_value), abs(z.min_value))
    elapsed = time.perf_counter() - start
    ok = (v.status == NO_ARBITRAGE_FOUND and v.initial_value <= 1e-8
          and v.sup_value <= v.threshold and zmax <= 1e-10 and elapsed <= 120)
    record(8, "no-arbitrage probe", ok,
           f"v0 {v.initial_value:.1e} (<= 1e-8), sup V {v.sup_value:.1e} (<= {v.threshold:.0e}) "
           f"over 500 paths, h = 0 gives max |V| {zmax:.1e} (<= 1e-10), {elapsed:.1f} s (<= 120 s)")
    assert ok


def test_c09_ftvp_residual(bs_model):
    start = time.perf_counter()
    F = asian_call_functional(0.2, 100.0, 1.0, 100.0)
    paths = generate_paths(PathGeneratorSpec(bs_model, (100.0,), 1.0, 14, seed=11, count=20))
    rng = np.random.default_rng(11)
    ts = paths[0].times()
    samples = [(paths[i % 20], ts[rng.integers(1, int(0.9 * (ts.size - 1)))]) for i in range(100)]
    rep = ftvp_residual(F, bs_model, samples)
    table = [[functional_hedge_check(F, p, n).discrepancy for n in (10, 12, 14)] for p in paths]
    medians = np.median(table, axis=0)
    f0 = F.evaluate(paths[0], 0.0)
    frac = medians[-1] / f0
    elapsed = time.perf_counter() - start
    ok = (rep.passed and frac <= 0.01 and medians[0] > medians[1] > medians[2]
          and elapsed <= 120)
    record(9, "FTVP residual", ok,
           f"sup |DF + AF| {rep.sup_residual:.2e} (<= {rep.tolerance:.2e}), self-financing "
           f"L10/12/14 {medians[0]:.3f}/{medians[1]:.3f}/{medians[2]:.3f}, L14 = "
           f"{100 * frac:.2f}% of F0 (<= 1%), {elapsed:.1f} s (<= 120 s)")
    assert ok


@pytest.mark.parametrize("name", ["qv", "integrate", "heat", "bs_price", "asian", "hedge",
                                  "robust", "noarb", "ftvp"])
def test_c10_determinism(tmp_path, name):
    cfg = CONFIGS / f"{name}.toml"
    command = next(line.split('"')[1] for line in cfg.read_text().splitlines()
                   if line.startswith("command"))
    dirs = []
    for label, threads in (("a", 1), ("b", 1), ("c", 2), ("d", 8)):
        out = tmp_path / label
        code = main([command, "--config", str(cfg), "--out", str(out), "--threads", str(threads)])
        assert code == 0
        dirs.append(out)
    csvs = sorted(p.name for p in dirs[0].glob("*.csv"))
    same = bool(csvs) and all(
        filecmp.cmp(dirs[0] / f, d / f, shallow=False) for d in dirs[1:] for f in csvs)
    record(10, f"determinism [{name}]", same,
           f"{len(csvs)} CSV files byte-identical across runs at 1, 1, 2 and 8 threads")
    assert same
