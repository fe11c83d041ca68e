"""Recursive terminal-value scheme for discretely monitored payoffs.

For fixing times ``t_0 < ... < t_N`` and payoff ``h(x_0, ..., x_N)`` the value
on ``[t_k, t_{k+1}]`` given the realized prefix ``x_0..x_k`` solves the
backward equation with terminal data

    f_{k+1}(x) = v_{k+1}(t_{k+1}, x_0, ..., x_k, x, x),    v_N = h.

``f_{k+1}`` is tabulated on a coarse fixing grid (every ``s``-th PDE node),
each entry being a nested solve with the prefix extended by that node, and
then interpolated cubically onto the PDE grid.  When ``h`` ignores fixing
``k+1`` a single nested solve gives ``f_{k+1}`` on the whole grid.
"""

from __future__ import annotations

import threading
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, RectBivariateSpline

from .lattice import (
    GridDomainError,
    GridSolution,
    GridSpec,
    LatticeError,
    LocalVolModel,
    problem_for,
    solve_problem,
)
from .pathcalc import Flavor, PartitionHierarchy
from .payoff import PayoffSpec


class SchemeError(ValueError):
    pass


class SchemeBudgetError(SchemeError):
    pass


DEFAULT_BUDGET = 100_000


@dataclass(frozen=True)
class FixingSchedule:
    """Fixing times ``0 = t_0 < ... < t_N = T`` on the dyadic level ``level``."""

    times: tuple
    level: int = 14

    def __post_init__(self):
        ts = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", ts)
        if len(ts) < 2:
            raise SchemeError("a schedule needs at least t_0 and t_N")
        if ts[0] != 0.0:
            raise SchemeError("the first fixing must be t_0 = 0")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise SchemeError("fixing times must be strictly increasing")
        hier = self.hierarchy
        for t in ts:
            if not hier.contains(t):
                raise SchemeError(f"fixing time {t} is not a node of level {self.level}")

    @classmethod
    def uniform(cls, n: int, horizon: float = 1.0, level: int = 14) -> "FixingSchedule":
        return cls(tuple(horizon * k / n for k in range(n + 1)), level)

    @property
    def n(self) -> int:
        return len(self.times) - 1

    @property
    def horizon(self) -> float:
        return self.times[-1]

    @property
    def hierarchy(self) -> PartitionHierarchy:
        return PartitionHierarchy(self.times[-1], self.level)

    def interval_of(self, t: float) -> int:
        """The ``k`` with ``t_k <= t < t_{k+1}`` (``N - 1`` at ``t = T``)."""
        if t < 0 or t > self.horizon:
            raise SchemeError(f"time {t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(k, self.n - 1)


@dataclass
class SchemeContext:
    """State shared by every solution derived from one root build."""

    model: LocalVolModel
    schedule: FixingSchedule
    payoff: PayoffSpec
    grid: GridSpec
    fixing_points: int = 33
    budget: int = DEFAULT_BUDGET
    use_memo: bool = True
    executor: Executor | None = field(default=None, repr=False)
    memo: dict = field(default_factory=dict, repr=False)
    nested_solves: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        if self.payoff.n_fixings != self.schedule.n:
            raise SchemeError(f"payoff has {self.payoff.n_fixings} fixings, schedule has "
                              f"{self.schedule.n}")
        if self.payoff.dim != self.model.dim or self.grid.dim != self.model.dim:
            raise SchemeError("payoff, grid and model dimensions differ")
        if (self.grid.n_space - 1) % (self.fixing_points - 1):
            raise SchemeError(f"n_space - 1 = {self.grid.n_space - 1} must be a multiple of "
                              f"fixing_points - 1 = {self.fixing_points - 1}")
        self.axes = self.grid.axes()
        self.stride = (self.grid.n_space - 1) // (self.fixing_points - 1)
        self.fixing_axis_index = np.arange(0, self.grid.n_space, self.stride)
        self.problem = problem_for(self.model, lambda x: np.zeros(x.shape[:-1]))
        self.log_space = self.model.flavor is Flavor.POSITIVE

    # coordinates ------------------------------------------------------------
    def to_solver(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.log(x) if self.log_space else x

    def to_original(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.exp(y) if self.log_space else y

    def check_inside(self, x) -> None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.log_space and np.any(x <= 0):
            raise GridDomainError(f"fixing {x.tolist()} is not positive")
        if not self.grid.contains(self.to_solver(x)):
            raise GridDomainError(f"fixing {x.tolist()} lies outside the PDE grid")

    def nodes(self) -> np.ndarray:
        Y = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)
        return self.to_original(Y)

    # budget -----------------------------------------------------------------
    def required_solves(self, k: int) -> int:
        """Nested solves needed to build ``v_k`` from scratch (memo aside)."""
        per_node = self.fixing_points ** self.model.dim
        total, branch = 0, 1
        for j in range(k + 1, self.schedule.n):
            branch *= per_node if j in self.payoff.depends_on else 1
            total += branch
        return total

    def memo_key(self, k: int, prefix: np.ndarray) -> tuple:
        """Prefix entries the payoff reads, snapped to PDE node indices when on the lattice."""
        entries = []
        for i in sorted(self.payoff.depends_on):
            if i > k:
                break
            row = []
            for c, y in enumerate(self.to_solver(prefix[i])):
                ax = self.axes[c]
                h = ax[1] - ax[0]
                u = (y - ax[0]) / h
                j = round(u)
                row.append(("n", j) if abs(u - j) <= 1e-9 and 0 <= j < ax.size else float(y))
            entries.append((i, tuple(row)))
        return (k, tuple(entries))

    def time_steps(self) -> int | None:
        return self.grid.n_time


def _extend(prefix: np.ndarray, x) -> np.ndarray:
    return np.concatenate([prefix, np.atleast_1d(np.asarray(x, dtype=float))[None]], axis=0)


def _terminal_on_grid(ctx: SchemeContext, k: int, prefix: np.ndarray) -> np.ndarray:
    """``f_{k+1}`` at the PDE nodes for the prefix ``x_0..x_k``."""
    N = ctx.schedule.n
    X = ctx.nodes()
    shape = X.shape[:-1]
    if k + 1 == N:
        fix = np.broadcast_to(prefix, shape + prefix.shape)
        return ctx.payoff.evaluate(np.concatenate([fix, X[..., None, :]], axis=-2))
    if (k + 1) not in ctx.payoff.depends_on:
        # v_{k+1} ignores its newest prefix entry: one solve covers every x.
        return _nested(ctx, k + 1, _extend(prefix, prefix[-1]))
    idx = ctx.fixing_axis_index
    if ctx.model.dim == 1:
        points = [(i,) for i in idx]
    else:
        points = [(i, j) for i in idx for j in idx]
    node_x = [X[p] for p in points]
    jobs = [_extend(prefix, x) for x in node_x]
    if ctx.executor is not None:
        slices = list(ctx.executor.map(lambda pre: _nested(ctx, k + 1, pre), jobs))
    else:
        slices = [_nested(ctx, k + 1, pre) for pre in jobs]
    vals = np.array([s[p] for s, p in zip(slices, points)])
    yf = [ax[idx] for ax in ctx.axes]
    if ctx.model.dim == 1:
        return CubicSpline(yf[0], vals)(ctx.axes[0])
    spline = RectBivariateSpline(yf[0], yf[1], vals.reshape(idx.size, idx.size), kx=3, ky=3)
    return spline(ctx.axes[0], ctx.axes[1])


def _solve_interval(ctx: SchemeContext, k: int, prefix: np.ndarray, keep: str) -> GridSolution:
    f = _terminal_on_grid(ctx, k, prefix)
    t0, t1 = ctx.schedule.times[k], ctx.schedule.times[k + 1]
    return solve_problem(ctx.problem, t0, t1, ctx.grid, terminal_values=f, keep=keep)


def _nested(ctx: SchemeContext, k: int, prefix: np.ndarray) -> np.ndarray:
    """Initial slice of ``v_k(t_k, prefix, .)`` on the PDE grid, memoised."""
    key = ctx.memo_key(k, prefix) if ctx.use_memo else None
    if key is not None:
        with ctx._lock:
            hit = ctx.memo.get(key)
        if hit is not None:
            return hit
    sol = _solve_interval(ctx, k, prefix, keep="initial")
    out = sol.values[0]
    out.setflags(write=False)
    with ctx._lock:
        ctx.nested_solves += 1
        if key is not None:
            out = ctx.memo.setdefault(key, out)
    return out


@dataclass
class SchemeSolution:
    """``v_k`` for a frozen prefix ``x_0..x_k`` on ``[t_k, t_{k+1}]``.

    At ``k = N`` there is no interval left and ``terminal_value`` holds ``h``.
    """

    context: SchemeContext
    k: int
    prefix: np.ndarray
    solution: GridSolution | None
    terminal_value: float | None = None

    @property
    def interval(self) -> tuple[float, float]:
        ts = self.context.schedule.times
        if self.k >= self.context.schedule.n:
            return ts[-1], ts[-1]
        return ts[self.k], ts[self.k + 1]

    @property
    def exhausted(self) -> bool:
        return self.solution is None

    def value(self, t, x, clamp: bool = False) -> np.ndarray:
        if self.solution is None:
            return np.full(np.shape(np.atleast_1d(x))[:-1] or (), self.terminal_value)
        return self.solution.value(t, x, clamp)

    def delta(self, t, x, clamp: bool = False) -> np.ndarray:
        return scheme_delta(self, t, x, clamp)

    def price(self) -> float:
        """``v_k(t_k, x_0..x_k, x_k)``."""
        t0 = self.interval[0]
        if self.solution is None:
            return float(self.terminal_value)
        return float(np.asarray(self.solution.value(t0, self.prefix[-1][None]))[0])

    def stitching_error(self) -> float:
        """Max gap between ``f_{k+1}`` on the PDE grid and the nested values at fixing nodes."""
        ctx = self.context
        if self.solution is None or self.k + 1 == ctx.schedule.n:
            return 0.0
        idx = ctx.fixing_axis_index
        X = ctx.nodes()
        err = 0.0
        pts = [(i,) for i in idx] if ctx.model.dim == 1 else [(i, j) for i in idx for j in idx]
        for p in pts:
            direct = _nested(ctx, self.k + 1, _extend(self.prefix, X[p]))[p]
            err = max(err, abs(float(self.solution.values[-1][p]) - float(direct)))
        return err

    def min_value(self) -> float:
        return float(self.terminal_value if self.solution is None else np.min(self.solution.values))


def build_scheme(model: LocalVolModel, schedule: FixingSchedule, payoff: PayoffSpec,
                 prefix=None, grid: GridSpec | None = None, fixing_points: int = 33,
                 n_space: int = 801, budget: int = DEFAULT_BUDGET, use_memo: bool = True,
                 executor: Executor | None = None,
                 context: SchemeContext | None = None) -> SchemeSolution:
    """Build ``v_k`` for the realized ``prefix`` (default: just the spot ``x_0``).

    ``prefix`` has ``k + 1`` rows.  The grid defaults to six standard
    deviations over the full horizon around ``x_0``.
    """
    if prefix is None:
        raise SchemeError("prefix must contain at least the initial spot x_0")
    pre = np.asarray(prefix, dtype=float)
    if pre.ndim == 0 or (pre.ndim == 1 and model.dim == 1):
        pre = pre.reshape(-1, 1)
    elif pre.ndim == 1:
        pre = pre[None]
    if pre.shape[1] != model.dim:
        raise SchemeError(f"prefix has dimension {pre.shape[1]}, model has {model.dim}")
    k = pre.shape[0] - 1
    if k >= schedule.n:
        raise SchemeError("prefix already covers every fixing")
    if context is None:
        if grid is None:
            grid = GridSpec.around(pre[0], model, schedule.horizon, n_space=n_space,
                                   fixing_points=fixing_points)
        lo = np.array([b[0] for b in grid.bounds])
        hi = np.array([b[1] for b in grid.bounds])
        if model.flavor is Flavor.POSITIVE:
            lo, hi = np.exp(lo), np.exp(hi)
        model.validate(lo, hi, schedule.horizon)
        context = SchemeContext(model, schedule, payoff, grid, grid.fixing_points, budget,
                                use_memo, executor)
    for row in pre:
        context.check_inside(row)
    need = context.required_solves(k)
    if need > context.budget:
        raise SchemeBudgetError(f"{need} nested solves exceed the budget of {context.budget}")
    sol = _solve_interval(context, k, pre, keep="all")
    return SchemeSolution(context, k, pre, sol)


def scheme_delta(solution: SchemeSolution, t, spot, clamp: bool = False) -> np.ndarray:
    """``grad_x v_k(t, prefix, spot)`` on the solution's interval."""
    if solution.solution is None:
        return np.zeros(np.shape(np.atleast_1d(spot)))
    t0, t1 = solution.interval
    ta = np.asarray(t, dtype=float)
    if np.any(ta < t0 - 1e-12) or np.any(ta > t1 + 1e-12):
        raise SchemeError(f"time outside the interval [{t0}, {t1}]")
    return solution.solution.gradient(t, spot, clamp)


def roll_fixing(solution: SchemeSolution, observed) -> SchemeSolution:
    """Record the fixing at ``t_{k+1}`` and move to ``v_{k+1}``."""
    ctx = solution.context
    if solution.solution is None:
        raise SchemeError("schedule exhausted")
    x = np.atleast_1d(np.asarray(observed, dtype=float))
    if x.shape != (ctx.model.dim,):
        raise SchemeError(f"fixing has shape {x.shape}, expected ({ctx.model.dim},)")
    ctx.check_inside(x)
    pre = _extend(solution.prefix, x)
    k = solution.k + 1
    if k == ctx.schedule.n:
        return SchemeSolution(ctx, k, pre, None, float(ctx.payoff.evaluate(pre)))
    sol = _solve_interval(ctx, k, pre, keep="all")
    return SchemeSolution(ctx, k, pre, sol)


def value_continuity(before: SchemeSolution, after: SchemeSolution) -> float:
    """``|v_k(t_{k+1}, prefix, x) - v_{k+1}(t_{k+1}, prefix + x, x)|`` at the rolled fixing."""
    x = after.prefix[-1]
    t = before.interval[1]
    left = float(np.asarray(before.value(t, x[None]))[0])
    right = after.price()
    return abs(left - right)


__all__ = [
    "FixingSchedule",
    "SchemeBudgetError",
    "SchemeContext",
    "SchemeError",
    "SchemeSolution",
    "build_scheme",
    "roll_fixing",
    "scheme_delta",
    "value_continuity",
]
