"""Pathwise Delta hedging along sampled trajectories.

The hedger holds ``xi(t) = grad_x v_k(t, x_0..x_k, S(t))`` on ``[t_k, t_{k+1})``
and rolls the scheme at every fixing.  Portfolio value is *defined* as the
initial capital plus the left-point Föllmer sum of ``xi``, so the strategy is
self-financing by construction and ``eta = V - xi . S``.
"""

from __future__ import annotations

import csv
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import GridSpec, LocalVolModel
from .pathcalc import PathError, SampledPath, covariation_sums, follmer_integral
from .paths import (  # noqa: F401  re-exported
    PathGeneratorSpec,
    covariation_check,
    generate_path,
    generate_paths,
    path_rng,
)
from .payoff import PayoffSpec
from .scheme import FixingSchedule, SchemeSolution, build_scheme, roll_fixing, value_continuity


class HedgeError(ValueError):
    pass


@dataclass
class HedgeReport:
    times: np.ndarray
    spots: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    value: np.ndarray
    initial_capital: float
    payoff: float
    level: int
    exited_grid: bool
    realized_covariation: np.ndarray
    model_covariation: np.ndarray
    roll_gaps: list = field(default_factory=list)
    min_grid_value: float = 0.0

    @property
    def error(self) -> float:
        """Replication error ``V(T) - h``."""
        return float(self.value[-1] - self.payoff)

    @property
    def dim(self) -> int:
        return self.spots.shape[1]

    def to_csv(self, target: str | Path) -> None:
        d = self.dim
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "V"] + [f"xi_{i + 1}" for i in range(d)] + ["eta"]
                       + [f"S_{i + 1}" for i in range(d)])
            for k, t in enumerate(self.times):
                w.writerow([repr(float(t)), repr(float(self.value[k]))]
                           + [repr(float(v)) for v in self.xi[k]]
                           + [repr(float(self.eta[k]))]
                           + [repr(float(v)) for v in self.spots[k]])


def _inside(sol: SchemeSolution, X: np.ndarray) -> bool:
    ctx = sol.context
    if ctx.log_space and np.any(X <= 0):
        return False
    Y = ctx.to_solver(X)
    lo = np.array([b[0] for b in ctx.grid.bounds])
    hi = np.array([b[1] for b in ctx.grid.bounds])
    return bool(np.all((Y >= lo) & (Y <= hi)))


def run_hedge(path: SampledPath, schedule: FixingSchedule, payoff: PayoffSpec,
              hedge_model: LocalVolModel, level: int | None = None,
              root: SchemeSolution | None = None, grid: GridSpec | None = None) -> HedgeReport:
    """Delta-hedge ``payoff`` along ``path`` rebalancing on ``T_level``.

    ``root`` is a prebuilt scheme for ``x_0 = path(0)``; sharing one across
    paths avoids rebuilding the nested solves.  Leaving the PDE grid sets
    ``exited_grid``; gradients are then taken at the nearest grid edge.
    """
    level = path.level if level is None else level
    if level > path.level:
        raise PathError(f"level {level} exceeds path level {path.level}")
    if abs(path.horizon - schedule.horizon) > 1e-12:
        raise HedgeError("path horizon differs from the schedule horizon")
    if path.dim != hedge_model.dim:
        raise HedgeError("path and model dimensions differ")
    ts = path.times(level)
    X = path.at_level(level)
    fix_idx = []
    for t in schedule.times:
        k = int(round(t / path.horizon * (ts.size - 1)))
        if abs(ts[k] - t) > 1e-12 * max(1.0, path.horizon):
            raise HedgeError(f"fixing time {t} is not a node of level {level}")
        fix_idx.append(k)
    if root is None:
        root = build_scheme(hedge_model, schedule, payoff, X[0], grid=grid)
    elif not np.allclose(root.prefix[0], X[0], rtol=0, atol=1e-12) or root.k != 0:
        raise HedgeError("root scheme was built for a different starting spot")

    xi = np.zeros_like(X)
    current = root
    exited = False
    gaps = []
    min_v = root.min_value()
    v0 = root.price()
    for k in range(schedule.n):
        a, b = fix_idx[k], fix_idx[k + 1]
        seg_t, seg_x = ts[a:b], X[a:b]
        exited |= not _inside(current, seg_x)
        xi[a:b] = current.delta(seg_t, seg_x, clamp=True).reshape(seg_x.shape)
        fixing = X[b]
        if not _inside(current, fixing[None]):
            exited = True
            fixing = _clamp_to_grid(current, fixing)
        nxt = roll_fixing(current, fixing)
        gaps.append(value_continuity(current, nxt))
        min_v = min(min_v, nxt.min_value())
        current = nxt
    xi[-1] = xi[-2]
    integral = follmer_integral(xi, path, level).values
    V = v0 + integral
    eta = V - np.einsum("kd,kd->k", xi, X)
    fixings = X[fix_idx]
    h = float(payoff.evaluate(fixings))
    realized = covariation_sums(path, level)[-1]
    dens = hedge_model.covariation_density(ts[:-1], X[:-1])
    model_cov = (dens * np.diff(ts)[:, None, None]).sum(axis=0)
    return HedgeReport(ts, X, xi, eta, V, v0, h, level, exited, realized, model_cov, gaps, min_v)


def _clamp_to_grid(sol: SchemeSolution, x: np.ndarray) -> np.ndarray:
    ctx = sol.context
    lo = np.array([b[0] for b in ctx.grid.bounds])
    hi = np.array([b[1] for b in ctx.grid.bounds])
    return ctx.to_original(np.clip(ctx.to_solver(x), lo, hi))


def hedge_many(paths, schedule, payoff, hedge_model, level=None, root=None,
               threads: int = 1) -> list[HedgeReport]:
    """``run_hedge`` over ``paths`` in order; results do not depend on ``threads``."""
    if root is None and paths:
        root = build_scheme(hedge_model, schedule, payoff, paths[0].values[0])

    def one(p):
        return run_hedge(p, schedule, payoff, hedge_model, level, root)

    if threads <= 1:
        return [one(p) for p in paths]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, paths))


# -- robustness ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    payoff: str
    kappa: float
    n_paths: int
    median_error: float
    shortfall_freq: float
    tolerance: float


def robustness_sweep(payoffs, kappas, model: LocalVolModel, schedule: FixingSchedule, spot,
                     n_paths: int = 200, seed: int = 0, level: int | None = None,
                     tolerance: float | None = None, threads: int = 1) -> list[SweepRow]:
    """Hedge with ``a`` on paths whose covariation is ``kappa * a``.

    ``payoffs`` is a list of ``(name, PayoffSpec)``.  A path counts as a
    shortfall when ``V(T) - h < -tolerance`` (default 0.1% of the spot).
    ``median_error`` is the median signed ``V(T) - h``.
    """
    kappas = [float(k) for k in kappas]
    if not (min(kappas) < 1 < max(kappas)):
        raise HedgeError("the kappa grid must include values below and above 1")
    spot = np.atleast_1d(np.asarray(spot, dtype=float))
    tol = 1e-3 * float(np.max(np.abs(spot))) if tolerance is None else float(tolerance)
    rows = []
    for (name, pay), kappa in itertools.product(payoffs, kappas):
        spec = PathGeneratorSpec(model, tuple(spot), schedule.horizon, schedule.level, seed,
                                 n_paths, kappa)
        paths = generate_paths(spec)
        reports = hedge_many(paths, schedule, pay, model, level, threads=threads)
        errs = np.array([r.error for r in reports])
        rows.append(SweepRow(name, kappa, n_paths, float(np.median(errs)),
                             float(np.mean(errs < -tol)), tol))
    return rows


def write_sweep_csv(rows, target: str | Path) -> None:
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["payoff", "kappa", "n_paths", "median_error", "shortfall_freq"])
        for r in rows:
            w.writerow([r.payoff, repr(r.kappa), r.n_paths, repr(r.median_error),
                        repr(r.shortfall_freq)])


# -- no-arbitrage probe ----------------------------------------------------------

NOT_APPLICABLE = "NOT-APPLICABLE"
NO_ARBITRAGE_FOUND = "NO ARBITRAGE FOUND AT TOLERANCE"
ARBITRAGE_CANDIDATE = "ARBITRAGE CANDIDATE"


@dataclass(frozen=True)
class ProbeVerdict:
    status: str
    initial_value: float
    sup_value: float
    threshold: float
    floor: float
    min_value: float
    n_paths: int

    @property
    def passed(self) -> bool:
        return self.status != ARBITRAGE_CANDIDATE


def payoff_nonnegative_on_fixing_grid(root: SchemeSolution, max_points: int = 2_000_000) -> bool:
    """Check ``h >= 0`` on the tensor fixing grid (randomly thinned when huge)."""
    ctx = root.context
    idx = ctx.fixing_axis_index
    X = ctx.nodes()
    nodes = X[idx] if ctx.model.dim == 1 else X[np.ix_(idx, idx)].reshape(-1, ctx.model.dim)
    n_fix = ctx.schedule.n + 1
    total = nodes.shape[0] ** n_fix
    if total <= max_points:
        combo = np.array(list(itertools.product(range(nodes.shape[0]), repeat=n_fix)))
    else:
        rng = np.random.default_rng(0)
        combo = rng.integers(0, nodes.shape[0], size=(max_points, n_fix))
    vals = ctx.payoff.evaluate(nodes[combo])
    return bool(np.all(vals >= 0))


def no_arbitrage_probe(root: SchemeSolution, paths, level: int | None = None,
                       eps: float = 1e-8, scale: float | None = None,
                       mc_tolerance: float = 0.0, threads: int = 1) -> ProbeVerdict:
    """Sample-based check that a scheme strategy with ``v_0 <= eps`` and ``h >= 0`` gains nothing.

    Verdict ``NO ARBITRAGE FOUND AT TOLERANCE`` when no sampled ``V(t)``
    exceeds ``1e-6 * scale + mc_tolerance`` and ``V(t) >= -c - eps * scale``
    with ``c = max(0, -min v)`` over every grid used.  This can refute, never
    prove.
    """
    if not isinstance(root, SchemeSolution) or root.k != 0:
        raise HedgeError("the probe needs a root strategy produced by build_scheme")
    if not payoff_nonnegative_on_fixing_grid(root):
        raise HedgeError("payoff takes negative values on the fixing grid")
    ctx = root.context
    spot = root.prefix[0]
    scale = float(np.max(np.abs(spot))) if scale is None else float(scale)
    v0 = root.price()
    threshold = 1e-6 * scale + mc_tolerance
    if v0 > eps:
        return ProbeVerdict(NOT_APPLICABLE, v0, np.nan, threshold, np.nan, np.nan, len(paths))
    reports = hedge_many(paths, ctx.schedule, ctx.payoff, ctx.model, level, root, threads)
    sup_v = max(float(np.max(r.value)) for r in reports)
    min_v = min(float(np.min(r.value)) for r in reports)
    floor = max(0.0, -min(r.min_grid_value for r in reports))
    ok = sup_v <= threshold and min_v >= -floor - eps * scale
    status = NO_ARBITRAGE_FOUND if ok else ARBITRAGE_CANDIDATE
    return ProbeVerdict(status, v0, sup_v, threshold, floor, min_v, len(paths))
