"""Command-line runner: one TOML config in, CSV reports plus a JSON manifest out.

Exit codes: 0 all checks passed, 1 a numerical check failed, 2 parse error or
bad usage, 3 validation error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigParseError, ConfigValidationError, ExperimentConfig, parse_payoff
from .lattice import GridDomainError, LatticeError, solve_tvp
from .pathcalc import (
    PathError,
    basic_strategy,
    covariation,
    follmer_integral,
    ito_identity_rhs,
)

log = logging.getLogger("pathhedge")

EXIT_OK, EXIT_CHECK, EXIT_PARSE, EXIT_VALIDATION, EXIT_IO = 0, 1, 2, 3, 4
COMMANDS = ("qv", "integrate", "solve", "price", "hedge", "robust", "noarb", "ftvp")


@dataclass
class Run:
    """Accumulates checks and output files for one command."""

    command: str
    config: ExperimentConfig
    out: Path
    threads: int = 1
    checks: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def check(self, name: str, value: float, tolerance: float, passed: bool | None = None,
              kind: str = "<=") -> bool:
        if passed is None:
            passed = bool(value <= tolerance) if kind == "<=" else bool(value >= tolerance)
        self.checks.append({"name": name, "value": _num(value), "tolerance": _num(tolerance),
                            "relation": kind, "passed": bool(passed)})
        return passed

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_rows(self, name: str, header, rows) -> None:
        with open(self.path(name), "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def manifest(self) -> dict:
        return {
            "version": __version__,
            "command": self.command,
            "config": self.config.echo(),
            "seed": self.config.seed(),
            "threads": self.threads,
            "tolerances": {c["name"]: c["tolerance"] for c in self.checks},
            "checks": self.checks,
            "info": self.info,
            "outputs": self.outputs,
            "status": "PASS" if self.passed else "FAIL",
        }


def _num(v):
    v = float(v)
    return v if math.isfinite(v) else repr(v)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


@contextmanager
def _pool(threads: int):
    if threads <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            yield ex


def _map(pool, fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(i) for i in items]


# -- commands -----------------------------------------------------------------------


def _paths(run: Run, model, horizon: float | None = None, kappa: float | None = None):
    from .paths import PathGeneratorSpec, generate_paths

    cfg = run.config
    sec = cfg.section("paths")
    level = int(cfg.overrides.get("level", sec.get("level", 14)))
    horizon = float(sec.get("horizon", 1.0)) if horizon is None else horizon
    spec = PathGeneratorSpec(model, cfg.spot(model.dim), horizon, level, cfg.seed(),
                             int(sec.get("count", 1)),
                             float(sec.get("kappa", 1.0)) if kappa is None else kappa)
    run.info.setdefault("paths", {"count": spec.count, "level": level, "seed": spec.seed,
                                  "generator": "numpy Philox, key = seed + index * 2**64"})
    with _pool(run.threads) as pool:
        chunks = _map(pool, lambda i: generate_paths(spec, [i])[0], range(spec.count))
    return spec, chunks


def cmd_qv(run: Run) -> None:
    from .paths import covariation_check

    model = run.config.model()
    spec, paths = _paths(run, model)
    rows, ok = [], True
    for p_i, path in enumerate(paths):
        chk = covariation_check(path, model, spec.kappa)
        ok &= chk.passed
        for n in range(1, path.level + 1):
            cur = covariation(path, level=n)
            d = path.dim
            vals = [cur.terminal[i, j] for i in range(d) for j in range(i, d)]
            rows.append([p_i, n] + vals + [cur.cauchy_increment])
    d = model.dim
    names = [f"qv_{i + 1}{j + 1}" for i in range(d) for j in range(i, d)]
    run.write_rows("qv.csv", ["path", "level"] + names + ["cauchy"], rows)
    run.check("covariation_within_6sd", 0.0 if ok else 1.0, 0.0)


def cmd_integrate(run: Run) -> None:
    cfg = run.config
    model = cfg.model()
    sec = cfg.section("integrate")
    levels = [int(v) for v in sec.get("levels", [10, 12, 14])]
    strikes = [float(k) for k in sec.get("strikes", [0.0, 1.0])]
    _, paths = _paths(run, model)
    d = model.dim
    pairs = [(i, j) for i in range(d) for j in range(i, d)]

    def one(path):
        out = []
        for n in levels:
            ts, X = path.times(n), path.at_level(n)
            for i, j in pairs:
                for K in strikes:
                    lhs = follmer_integral(basic_strategy(i, j, K, d)(ts, X), path, n).values
                    rhs = ito_identity_rhs(path, i, j, K, n)
                    scale = max(1.0, float(np.max(np.abs(rhs))), float(np.max(np.abs(lhs))))
                    out.append((n, i + 1, j + 1, K, float(np.max(np.abs(lhs - rhs))) / scale))
        return out

    with _pool(run.threads) as pool:
        results = _map(pool, one, paths)
    rows = [[p] + list(r) for p, res in enumerate(results) for r in res]
    run.write_rows("integrate.csv", ["path", "level", "i", "j", "K", "max_rel_error"], rows)
    worst = max(r[-1] for r in rows)
    run.check("ito_identity_rel_error", worst, float(cfg.check("rel_tol", 1e-10)))


def cmd_solve(run: Run) -> None:
    cfg = run.config
    model = cfg.model()
    sec = cfg.section("problem", required=True)
    t0, t1 = float(sec.get("t_start", 0.0)), float(sec["t_end"])
    spot = cfg.spot(model.dim)
    grid = cfg.grid(model, spot, t1 - t0)
    terminal = parse_payoff(sec["terminal"], 1, model.dim)

    def f(x):
        return terminal.evaluate(np.stack([x, x], axis=-2))

    sol = solve_tvp(model, f, t0, t1, grid, evaluation=spot)
    sol.to_csv(run.path("solution.csv"))
    v = float(sol.value(t0, np.array(spot)[None])[0])
    grad = sol.gradient(t0, np.array(spot)[None])[0]
    run.info.update({"value": v, "delta": grad.tolist(), "steps": sol.n_steps})
    run.write_rows("value.csv", ["t"] + [f"x{i + 1}" for i in range(model.dim)]
                   + ["v"] + [f"delta_{i + 1}" for i in range(model.dim)],
                   [[t0, *spot, v, *grad]])
    exact_expr = cfg.check("exact")
    if exact_expr is not None:
        # ``exact`` is an expression in x1 (and t, given as the constant tau = t_end - t_start).
        exact = parse_payoff(exact_expr.replace("tau", repr(t1 - t0)), 1, model.dim)
        X = sol.nodes()
        ex = exact.evaluate(np.stack([X, X], axis=-2))
        mask = np.ones(X.shape[:-1], bool)
        region = cfg.check("region")
        if region is not None:
            for k, (lo, hi) in enumerate(region):
                mask &= (X[..., k] >= lo) & (X[..., k] <= hi)
        err = float(np.max(np.abs(sol.values[0] - ex)[mask]))
        run.info["max_error"] = err
        run.check("max_error", err, float(cfg.check("tolerance", 1e-3)))
    expected = cfg.check("expected")
    if expected is not None:
        rel = abs(v - float(expected)) / abs(float(expected))
        run.check("value_rel_error", rel, float(cfg.check("rel_tol", 2e-3)))
    residual = sol.pde_residual()
    run.check("pde_residual", residual, sol.residual_tolerance())


def _scheme(run: Run, pool=None):
    from .scheme import build_scheme

    cfg = run.config
    model = cfg.model()
    schedule = cfg.schedule()
    payoff = cfg.payoff(schedule.n, model.dim)
    spot = cfg.spot(model.dim)
    grid = cfg.grid(model, spot, schedule.horizon)
    if payoff.discontinuous:
        log.warning("payoff %s is discontinuous; results are convergence-trend only", payoff.text)
        run.info["discontinuous_payoff"] = True
    root = build_scheme(model, schedule, payoff, [spot], grid=grid, executor=pool)
    return model, schedule, payoff, spot, root


def cmd_price(run: Run) -> None:
    cfg = run.config
    with _pool(run.threads) as pool:
        model, schedule, payoff, spot, root = _scheme(run, pool)
    v = root.price()
    delta = root.delta(0.0, np.array(spot)[None])[0]
    run.info.update({"value": v, "delta": delta.tolist(),
                     "nested_solves": root.context.nested_solves})
    run.write_rows("price.csv", ["t"] + [f"x{i + 1}" for i in range(model.dim)] + ["v"]
                   + [f"delta_{i + 1}" for i in range(model.dim)], [[0.0, *spot, v, *delta]])
    expected = cfg.check("expected")
    if expected is not None:
        rel = abs(v - float(expected)) / abs(float(expected))
        run.check("value_rel_error", rel, float(cfg.check("rel_tol", 2e-3)))
    if cfg.check("expected_delta") is not None:
        err = float(np.max(np.abs(delta - np.asarray(cfg.check("expected_delta"), float))))
        run.check("delta_abs_error", err, float(cfg.check("delta_tol", 5e-3)))
    # nested terminals are spline-interpolated, so small undershoot near kinks is expected
    scale = max(1.0, float(np.max(np.abs(spot))), float(np.max(np.abs(root.solution.values[-1]))))
    run.check("min_value", root.min_value(), -1e-6 * scale, kind=">=")


def cmd_hedge(run: Run) -> None:
    from .hedge import run_hedge

    cfg = run.config
    with _pool(run.threads) as pool:
        model, schedule, payoff, spot, root = _scheme(run, pool)
        _, paths = _paths(run, model, schedule.horizon)
        level = int(cfg.section("hedge").get("level", paths[0].level))
        reports = _map(pool, lambda p: run_hedge(p, schedule, payoff, model, level, root), paths)
    rows = [[i, r.level, r.initial_capital, r.payoff, r.error, int(r.exited_grid)]
            for i, r in enumerate(reports)]
    run.write_rows("hedge_summary.csv", ["path", "level", "v0", "payoff", "error", "exited_grid"],
                   rows)
    reports[0].to_csv(run.path("hedge_path0.csv"))
    med = float(np.median([abs(r.error) for r in reports]))
    run.info["median_abs_error"] = med
    tol = cfg.check("median_abs_error")
    if tol is not None:
        run.check("median_abs_error", med, float(tol))
    identity = max(float(np.max(np.abs(r.eta + np.einsum("kd,kd->k", r.xi, r.spots) - r.value)))
                   for r in reports)
    run.check("eta_identity", identity, 1e-8 * max(1.0, max(abs(r.initial_capital)
                                                             for r in reports)))


def cmd_robust(run: Run) -> None:
    from .hedge import robustness_sweep, write_sweep_csv

    cfg = run.config
    model = cfg.model()
    schedule = cfg.schedule()
    sec = cfg.section("robust", required=True)
    payoffs = [(p["name"], parse_payoff(p["expr"], schedule.n, model.dim))
               for p in sec.get("payoffs", [])]
    if not payoffs:
        raise ConfigValidationError("[robust] needs at least one payoff")
    kappas = sec.get("kappas", [0.64, 1.0, 1.44])
    paths = cfg.section("paths")
    rows = robustness_sweep(payoffs, kappas, model, schedule, cfg.spot(model.dim),
                            int(paths.get("count", 200)), cfg.seed(),
                            int(cfg.section("hedge").get("level", schedule.level)),
                            threads=run.threads)
    write_sweep_csv(rows, run.path("sweep.csv"))
    limit = sec.get("max_shortfall_below_one")
    for name in sec.get("convex", []):
        mine = [r for r in rows if r.payoff == name]
        if not mine:
            raise ConfigValidationError(f"convex payoff {name!r} is not in [robust].payoffs")
        for r in mine:
            if limit is not None and r.kappa < 1:
                run.check(f"shortfall_{name}_{r.kappa!r}", r.shortfall_freq, float(limit))
        lo, hi = min(mine, key=lambda r: r.kappa), max(mine, key=lambda r: r.kappa)
        run.check(f"shortfall_direction_{name}", hi.shortfall_freq, lo.shortfall_freq,
                  passed=hi.shortfall_freq > lo.shortfall_freq, kind=">")


def cmd_noarb(run: Run) -> None:
    from .hedge import NOT_APPLICABLE, no_arbitrage_probe

    cfg = run.config
    with _pool(run.threads) as pool:
        model, schedule, payoff, spot, root = _scheme(run, pool)
    _, paths = _paths(run, model, schedule.horizon)
    verdict = no_arbitrage_probe(root, paths, level=cfg.section("hedge").get("level"),
                                 threads=run.threads)
    run.write_rows("noarb.csv", ["status", "v0", "sup_V", "threshold", "floor", "min_V",
                                 "n_paths"],
                   [[verdict.status, verdict.initial_value, verdict.sup_value,
                     verdict.threshold, verdict.floor, verdict.min_value, verdict.n_paths]])
    run.info["verdict"] = verdict.status
    if verdict.status != NOT_APPLICABLE:
        run.check("sup_V", verdict.sup_value, verdict.threshold)
    run.check("probe", 0.0 if verdict.passed else 1.0, 0.0)


def cmd_ftvp(run: Run) -> None:
    from .functional import (
        asian_call_functional,
        ftvp_residual,
        functional_hedge_check,
        lookback_functional,
    )

    cfg = run.config
    model = cfg.model()
    sec = cfg.section("functional", required=True)
    kind = sec.get("kind", "asian")
    sigma = float(sec.get("sigma", math.sqrt(model.bound)))
    horizon = float(sec.get("horizon", 1.0))
    scale = float(cfg.spot(1)[0])
    if kind == "asian":
        F = asian_call_functional(sigma, float(sec["strike"]), horizon, scale)
    elif kind == "lookback":
        F = lookback_functional(sigma, horizon, scale)
    else:
        raise ConfigValidationError(f"unknown functional kind {kind!r}")
    _, paths = _paths(run, model, horizon)
    rng = np.random.default_rng(cfg.seed())
    n_samples = int(sec.get("samples", 100))
    t_max = float(sec.get("t_max_fraction", 0.9))
    n_nodes = paths[0].values.shape[0] - 1
    samples = [(paths[i % len(paths)], paths[0].times()[rng.integers(1, int(t_max * n_nodes))])
               for i in range(n_samples)]
    report = ftvp_residual(F, model, samples, diagonal_band=float(sec.get("diagonal_band", 0.0)))
    report.to_csv(run.path("ftvp_residual.csv"))
    run.check("sup_residual", report.sup_residual, report.tolerance)
    run.check("terminal_error", report.terminal_error, 0.0)
    levels = [int(v) for v in sec.get("levels", [10, 12, 14])]
    with _pool(run.threads) as pool:
        table = _map(pool, lambda p: [functional_hedge_check(F, p, n) for n in levels], paths)
    rows = [[i, c.level, c.initial_value, c.discrepancy] for i, res in enumerate(table)
            for c in res]
    run.write_rows("self_financing.csv", ["path", "level", "F0", "discrepancy"], rows)
    medians = [float(np.median([res[j].discrepancy for res in table])) for j in range(len(levels))]
    f0 = table[0][0].initial_value
    run.info["median_discrepancy"] = dict(zip(map(str, levels), medians))
    limit = sec.get("self_financing_fraction")
    if limit is not None:
        run.check("self_financing", medians[-1] / f0, float(limit))
        run.check("self_financing_trend",
                  0.0 if all(b < a for a, b in zip(medians, medians[1:])) else 1.0, 0.0)


HANDLERS = {
    "qv": cmd_qv, "integrate": cmd_integrate, "solve": cmd_solve, "price": cmd_price,
    "hedge": cmd_hedge, "robust": cmd_robust, "noarb": cmd_noarb, "ftvp": cmd_ftvp,
}


# -- entry point ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pathhedge", description="Pathwise hedging experiments from TOML configs.")
    p.add_argument("command", choices=COMMANDS, help="experiment to run")
    p.add_argument("--config", required=True, type=Path, help="TOML experiment file")
    p.add_argument("--out", type=Path, default=Path("out"), help="report directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--seed-override", type=int, default=None, help="replace [paths].seed")
    p.add_argument("--level", type=int, default=None, help="replace the dyadic level")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_PARSE
    try:
        cfg = ExperimentConfig.load(args.config)
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.seed_override is not None:
        if not 0 <= args.seed_override < 2**64:
            print("error: --seed-override must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_PARSE
        cfg.overrides["seed"] = args.seed_override
    if args.level is not None:
        cfg.overrides["level"] = args.level
    if cfg.command is not None and cfg.command != args.command:
        print(f"validation error: config is for {cfg.command!r}, not {args.command!r}",
              file=sys.stderr)
        return EXIT_VALIDATION
    run = Run(args.command, cfg, args.out, args.threads)
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](run)
        with open(run.out / "manifest.json", "w") as fh:
            json.dump(run.manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except ConfigParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigValidationError, GridDomainError, LatticeError, PathError, ValueError,
            KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for c in run.checks:
        log.info("%s %s: %s %s %s", "PASS" if c["passed"] else "FAIL", c["name"], c["value"],
                 c["relation"], c["tolerance"])
    print(f"{run.command}: {'PASS' if run.passed else 'FAIL'} "
          f"({sum(c['passed'] for c in run.checks)}/{len(run.checks)} checks)")
    return EXIT_OK if run.passed else EXIT_CHECK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
