"""Non-anticipative functionals with a finite-dimensional running state.

A functional ``F_t(X_t) = u(t, X(t), s(t))`` is represented by a value map
``u`` and a running statistic ``s``: nothing (terminal kind), the running
integral ``int_0^t X_1(r) dr`` or the running maximum of ``X_1``.  Vertical
and horizontal derivatives are computed the way they are defined, by bumping
the endpoint and by extending the path with its endpoint frozen, and the
state is updated accordingly.

Two value maps ship with the module: the fixed-strike arithmetic Asian call
(solved numerically through a one-dimensional similarity reduction) and the
floating lookback ``M_T`` (closed form), both under constant volatility.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.linalg import solve_banded
from scipy.stats import norm

from .lattice import GridDomainError, GridSolution, LocalVolModel
from .pathcalc import Flavor, PathError, SampledPath, follmer_integral


class StateKind(str, Enum):
    TERMINAL = "terminal"
    INTEGRAL = "integral"
    MAXIMUM = "maximum"


@dataclass(frozen=True)
class AugmentedFunctional:
    """``F_t(X_t) = value_map(t, X(t), s(t))`` with running state ``s``.

    ``value_map`` is vectorised: ``t`` of shape ``(m,)``, ``x`` of shape
    ``(m, d)`` and ``s`` of shape ``(m,)``.  ``payoff(x_T, s_T)`` is the
    terminal functional ``H``; the value map must reproduce it at ``t = T``.
    """

    kind: StateKind
    value_map: Callable
    payoff: Callable
    horizon: float
    dim: int = 1
    flavor: Flavor = Flavor.WHOLE
    scale: float = 1.0
    residual_tolerance: float | None = None
    smooth: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", StateKind(self.kind))
        object.__setattr__(self, "flavor", Flavor(self.flavor))

    # running state -------------------------------------------------------------
    def state_curve(self, path: SampledPath) -> np.ndarray:
        """Running state at every node of the path's finest level."""
        X = path.values[:, 0]
        if self.kind is StateKind.INTEGRAL:
            dt = path.hierarchy.mesh(path.level)
            out = np.zeros_like(X)
            np.cumsum(0.5 * (X[1:] + X[:-1]) * dt, out=out[1:])
            return out
        if self.kind is StateKind.MAXIMUM:
            return np.maximum.accumulate(X)
        return np.zeros_like(X)

    def bumped_state(self, s, x_new):
        """State after moving the endpoint to ``x_new`` (the past is untouched)."""
        if self.kind is StateKind.MAXIMUM:
            return np.maximum(s, np.asarray(x_new)[..., 0])
        return s

    def advanced_state(self, s, x, dt):
        """State after extending the path by ``dt`` with the endpoint frozen."""
        if self.kind is StateKind.INTEGRAL:
            return s + np.asarray(x)[..., 0] * dt
        return s

    def evaluate_state(self, t, x, s) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float).reshape(t.size, self.dim)
        s = np.broadcast_to(np.asarray(s, dtype=float), t.shape)
        return np.asarray(self.value_map(t, x, s), dtype=float)

    def on_path(self, path: SampledPath, level: int | None = None):
        """``(times, spots, states)`` on the nodes of ``T_level``."""
        level = path.level if level is None else level
        stride = path.hierarchy.stride(level)
        return path.times(level), path.at_level(level), self.state_curve(path)[::stride]

    def evaluate(self, path: SampledPath, t: float) -> float:
        k = path.hierarchy.index(t)
        s = self.state_curve(path)[k]
        return float(self.evaluate_state(t, path.values[k], s)[0])

    def terminal_payoff(self, path: SampledPath) -> float:
        s = self.state_curve(path)[-1]
        return float(np.asarray(self.payoff(path.values[-1][None], np.array([s])))[0])


# -- derivatives -------------------------------------------------------------------


def _bump_size(F: AugmentedFunctional, h):
    return 1e-4 * F.scale if h is None else float(h)


def vertical_derivatives(F: AugmentedFunctional, t, x, s, h: float | None = None):
    """Vectorised vertical gradient and Hessian at states ``(t, x, s)``.

    Central differences under the endpoint bump ``x -> x + h e_i``; the state
    reacts only through ``bumped_state``.
    """
    h = _bump_size(F, h)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.asarray(x, dtype=float).reshape(t.size, F.dim)
    s = np.broadcast_to(np.asarray(s, dtype=float), t.shape)
    if F.flavor is Flavor.POSITIVE and np.any(x - h <= 0):
        raise GridDomainError("vertical bump leaves the positive orthant")

    def at(shift):
        xn = x + shift
        return F.evaluate_state(t, xn, F.bumped_state(s, xn))

    f0 = at(np.zeros(F.dim))
    grad = np.empty((t.size, F.dim))
    hess = np.empty((t.size, F.dim, F.dim))
    eye = np.eye(F.dim) * h
    for i in range(F.dim):
        fp, fm = at(eye[i]), at(-eye[i])
        grad[:, i] = (fp - fm) / (2 * h)
        hess[:, i, i] = (fp - 2 * f0 + fm) / h**2
        for j in range(i):
            fpp, fpm = at(eye[i] + eye[j]), at(eye[i] - eye[j])
            fmp, fmm = at(-eye[i] + eye[j]), at(-eye[i] - eye[j])
            hess[:, i, j] = hess[:, j, i] = (fpp - fpm - fmp + fmm) / (4 * h**2)
    return grad, hess


def vertical_derivative(F: AugmentedFunctional, path: SampledPath, t: float,
                        h: float | None = None):
    """``(grad_x F, grad_x^2 F)`` at node ``t`` of ``path``."""
    if t >= F.horizon:
        raise PathError("vertical derivatives need t < T")
    k = path.hierarchy.index(t)
    s = F.state_curve(path)[k]
    g, H = vertical_derivatives(F, t, path.values[k], s, h)
    return g[0], H[0]


def horizontal_derivatives(F: AugmentedFunctional, t, x, s, dt: float) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    x = np.asarray(x, dtype=float).reshape(t.size, F.dim)
    s = np.broadcast_to(np.asarray(s, dtype=float), t.shape)
    if np.any(t + dt > F.horizon + 1e-12):
        raise PathError("horizontal extension runs past the horizon")
    f0 = F.evaluate_state(t, x, s)
    f1 = F.evaluate_state(t + dt, x, F.advanced_state(s, x, dt))
    return (f1 - f0) / dt


def horizontal_derivative(F: AugmentedFunctional, path: SampledPath, t: float,
                          dt: float | None = None) -> float:
    """``[F_{t+dt}(X_{t, frozen}) - F_t(X_t)] / dt`` with ``dt <= mesh(T_L)``."""
    mesh = path.hierarchy.mesh(path.level)
    dt = mesh if dt is None else float(dt)
    if dt > mesh * (1 + 1e-12) or dt <= 0:
        raise PathError(f"dt = {dt} must lie in (0, mesh = {mesh}]")
    k = path.hierarchy.index(t)
    s = F.state_curve(path)[k]
    return float(horizontal_derivatives(F, t, path.values[k], s, dt)[0])


# -- residual of the path-dependent equation -------------------------------------


@dataclass
class FTVPReport:
    rows: list
    sup_residual: float
    tolerance: float
    terminal_error: float
    passed: bool
    diagonal_rows: list = field(default_factory=list)

    def to_csv(self, target: str | Path) -> None:
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "state", "DF", "A_F", "residual"])
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])


def generator_term(F: AugmentedFunctional, model: LocalVolModel, t, x, hess) -> np.ndarray:
    """``1/2 sum a_ij grad^2_ij F`` (with ``x_i x_j`` weights for positive models)."""
    dens = model.covariation_density(t, x)
    return 0.5 * np.einsum("mij,mij->m", dens, hess)


def ftvp_residual(F: AugmentedFunctional, model: LocalVolModel, samples,
                  h: float | None = None, dt: float | None = None,
                  tolerance: float | None = None, diagonal_band: float = 0.0) -> FTVPReport:
    """Evaluate ``DF + A F`` at sampled ``(path, t)`` pairs.

    ``samples`` is an iterable of ``(SampledPath, t)`` with ``t`` a node of the
    path's level and ``t < T``.  Points within ``diagonal_band`` of the
    diagonal ``x = m`` of a running-maximum state are reported separately and
    excluded from the sup.  The terminal condition ``F_T = H`` is checked on
    every sampled path.
    """
    rows, diag_rows = [], []
    term_err = 0.0
    tol = F.residual_tolerance if tolerance is None else tolerance
    if tol is None:
        raise ValueError("no residual tolerance given")
    for path, t in samples:
        mesh = path.hierarchy.mesh(path.level)
        step = mesh if dt is None else dt
        k = path.hierarchy.index(t)
        s = F.state_curve(path)[k]
        x = path.values[k]
        g, H = vertical_derivatives(F, t, x, s, h)
        DF = horizontal_derivatives(F, t, x, s, step)[0]
        AF = generator_term(F, model, np.array([t]), x[None], H)[0]
        row = (t, x[0], s, DF, AF, DF + AF)
        near_diag = F.kind is StateKind.MAXIMUM and (s - x[0]) <= diagonal_band
        (diag_rows if near_diag else rows).append(row)
        term_err = max(term_err, abs(F.evaluate(path, path.horizon) - F.terminal_payoff(path)))
    sup = max((abs(r[5]) for r in rows), default=0.0)
    return FTVPReport(rows, sup, tol, term_err, sup <= tol and term_err == 0.0, diag_rows)


@dataclass(frozen=True)
class SelfFinancingCheck:
    discrepancy: float
    initial_value: float
    level: int
    curve: np.ndarray


def functional_hedge_check(F: AugmentedFunctional, path: SampledPath, level: int | None = None,
                           h: float | None = None) -> SelfFinancingCheck:
    """``max_t |F_t - F_0 - int grad_x F dS|`` with the Föllmer sum at ``level``."""
    ts, X, S = F.on_path(path, level)
    level = path.level if level is None else level
    vals = F.evaluate_state(ts, X, S)
    grad = np.zeros_like(X)
    inner = ts < F.horizon
    grad[inner], _ = vertical_derivatives(F, ts[inner], X[inner], S[inner], h)
    integral = follmer_integral(grad, path, level).values
    curve = vals - vals[0] - integral
    return SelfFinancingCheck(float(np.max(np.abs(curve))), float(vals[0]), level, curve)


# -- concrete functionals -----------------------------------------------------------


def spot_functional(horizon: float, dim: int = 1) -> AugmentedFunctional:
    """``F_t = X_1(t)``."""
    return AugmentedFunctional(StateKind.TERMINAL, lambda t, x, s: x[:, 0],
                               lambda x, s: x[:, 0], horizon, dim, residual_tolerance=1e-12)


def constant_functional(c: float, horizon: float, dim: int = 1) -> AugmentedFunctional:
    return AugmentedFunctional(StateKind.TERMINAL, lambda t, x, s: np.full(len(t), float(c)),
                               lambda x, s: np.full(len(x), float(c)), horizon, dim,
                               residual_tolerance=1e-12)


def integral_functional(horizon: float) -> AugmentedFunctional:
    """``F_t = int_0^t X(r) dr`` (not a solution of the equation; derivatives only)."""
    return AugmentedFunctional(StateKind.INTEGRAL, lambda t, x, s: s, lambda x, s: s, horizon)


def grid_functional(solution: GridSolution, payoff: Callable | None = None,
                    scale: float = 1.0) -> AugmentedFunctional:
    """``F_t = v(t, X(t))`` for a lattice solution (no path dependence).

    In one dimension the lattice values are read through a bicubic spline in
    ``(t, y)`` so that bump quotients see a smooth function rather than the
    kinks of linear interpolation.  Two-dimensional solutions use the
    solution's own interpolation.
    """
    if solution.dim == 1:
        spline = RectBivariateSpline(solution.times, solution.axes[0], solution.values,
                                     kx=3, ky=3, s=0)
        to_solver = np.log if solution.log_space else np.asarray

        def value(t, x, s):
            t = np.broadcast_to(np.asarray(t, float), np.shape(x)[:-1])
            return spline.ev(t, to_solver(np.asarray(x, float)[..., 0]))
    else:
        def value(t, x, s):
            return solution.value(t, x)

    if payoff is None:
        def payoff(x, s):
            return value(np.full(np.shape(x)[:-1], solution.t_end), x, s)

    return AugmentedFunctional(
        StateKind.TERMINAL, value, payoff, solution.t_end, solution.dim, solution.flavor,
        scale, solution.residual_tolerance(scale))


@dataclass
class AsianCallValue:
    """``u(t, x, I) = E[(I_T / T - K)+]`` under ``dX = sigma X dW``.

    With ``xi = (K - I / T) / x`` the value is ``u = x g(t, xi)`` where
    ``g_t - g_xi / T + sigma**2 xi**2 g_xixi / 2 = 0`` and ``g(T, xi) = (-xi)+``.
    For ``xi <= 0`` the solution is ``(T - t) / T - xi`` exactly, which gives
    the boundary value at ``xi = 0``; ``g = 0`` at ``xi_max``.

    Near ``xi = (T - t) / T`` the solution has a front of width about
    ``sigma xi sqrt(T - t)``, so the grid is uniform in
    ``z = log(1 + xi / xi_0)``, whose spacing in ``xi`` grows like ``xi + xi_0``.
    Time stepping is Crank-Nicolson after two implicit half steps; the
    first-order term uses central differences where the cell Peclet number
    allows and second-order upwinding elsewhere.  With ``richardson`` the grid
    values are extrapolated from this grid and one refined by two in both
    ``z`` and ``t``.
    """

    sigma: float
    strike: float
    horizon: float = 1.0
    n_z: int = 801
    n_t: int = 1000
    xi_max: float = 4.0
    xi_0: float = 0.02
    peclet_limit: float = 1.0
    richardson: bool = True
    z: np.ndarray = field(init=False, repr=False)
    xi: np.ndarray = field(init=False, repr=False)
    times: np.ndarray = field(init=False, repr=False)
    g: np.ndarray = field(init=False, repr=False)
    spline: RectBivariateSpline = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.sigma > 0 and self.strike > 0 and self.horizon > 0):
            raise ValueError("sigma, strike and horizon must be positive")
        self.z = np.linspace(0.0, math.log1p(self.xi_max / self.xi_0), self.n_z)
        self.xi = self.xi_0 * np.expm1(self.z)
        self.times = np.linspace(0.0, self.horizon, self.n_t + 1)
        self.g = self._solve(self.n_z, self.n_t)
        if self.richardson:
            fine = self._solve(2 * self.n_z - 1, 2 * self.n_t)
            self.g = (4.0 * fine[::2, ::2] - self.g) / 3.0
        self.spline = RectBivariateSpline(self.times, self.z, self.g, kx=3, ky=3, s=0)

    @property
    def h(self) -> float:
        """Grid spacing in the solver coordinate ``z``."""
        return self.z[1] - self.z[0]

    @property
    def dt(self) -> float:
        return self.horizon / self.n_t

    def _operator(self, z: np.ndarray) -> np.ndarray:
        """Operator rows as an ``(n, 4)`` band for offsets -2, -1, 0, +1."""
        h, T = z[1] - z[0], self.horizon
        xi = self.xi_0 * np.expm1(z)
        dxi = xi + self.xi_0  # d xi / dz, also d^2 xi / dz^2
        D = 0.5 * self.sigma**2 * xi**2 / dxi**2
        B = -1.0 / (T * dxi) - D  # coefficient of g_z; negative everywhere
        band = np.zeros((z.size, 4))
        band[:, 1] += D / h**2
        band[:, 2] += -2 * D / h**2
        band[:, 3] += D / h**2
        # Central differences where the cell Peclet number allows it (monotone),
        # otherwise second-order upwinding towards smaller z (B < 0).
        central = np.abs(B) * h <= self.peclet_limit * 2 * D
        central[:2] = True
        c = np.flatnonzero(central[1:]) + 1
        u = np.flatnonzero(~central)
        band[c, 1] += -B[c] / (2 * h)
        band[c, 3] += B[c] / (2 * h)
        band[u, 0] += B[u] / (2 * h)
        band[u, 1] += -4 * B[u] / (2 * h)
        band[u, 2] += 3 * B[u] / (2 * h)
        band[0] = band[-1] = 0.0
        return band

    def _solve(self, n: int, n_t: int) -> np.ndarray:
        z = np.linspace(0.0, self.z[-1], n)
        times = np.linspace(0.0, self.horizon, n_t + 1)
        dt_full = self.horizon / n_t
        band = self._operator(z)
        G = np.empty((n_t + 1, n))
        g = np.zeros(n)
        G[-1] = g

        def apply(v):
            out = band[:, 2] * v
            out[2:] += band[2:, 0] * v[:-2]
            out[1:] += band[1:, 1] * v[:-1]
            out[:-1] += band[:-1, 3] * v[1:]
            return out

        def step(v, dt, theta, t_lo):
            rhs = v + (1 - theta) * dt * apply(v) if theta < 1 else v.copy()
            ab = np.zeros((4, n))  # (l, u) = (2, 1): ab[1 + i - j, j]
            ab[0, 1:] = -theta * dt * band[:-1, 3]
            ab[1] = 1 - theta * dt * band[:, 2]
            ab[2, :-1] = -theta * dt * band[1:, 1]
            ab[3, :-2] = -theta * dt * band[2:, 0]
            rhs[0] = (self.horizon - t_lo) / self.horizon
            rhs[-1] = 0.0
            return solve_banded((2, 1), ab, rhs, overwrite_b=True, check_finite=False)

        for m in range(n_t, 0, -1):
            t_lo = times[m - 1]
            if m == n_t:
                mid = 0.5 * (times[m] + t_lo)
                g = step(g, dt_full / 2, 1.0, mid)
                g = step(g, dt_full / 2, 1.0, t_lo)
            else:
                g = step(g, dt_full, 0.5, t_lo)
            G[m - 1] = g
        return G

    def reduced(self, t, xi) -> np.ndarray:
        """``g(t, xi)``: exact for ``xi <= 0``, spline of the grid otherwise."""
        t, xi = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(xi, dtype=float))
        if np.any(xi > self.xi_max):
            raise GridDomainError(f"xi above the grid limit {self.xi_max}")
        out = (self.horizon - t) / self.horizon - xi
        pos = xi > 0
        if np.any(pos):
            out = out.copy()
            out[pos] = self.spline.ev(t[pos], np.log1p(xi[pos] / self.xi_0))
        return out

    def __call__(self, t, x, s) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)[..., 0]
        s = np.asarray(s, dtype=float)
        at_end = t >= self.horizon
        xi = np.where(at_end, 0.0, (self.strike - s / self.horizon) / x)
        out = x * self.reduced(np.minimum(t, self.horizon), xi)
        return np.where(at_end, np.maximum(s / self.horizon - self.strike, 0.0), out)

    def payoff(self, x, s) -> np.ndarray:
        return np.maximum(np.asarray(s, float) / self.horizon - self.strike, 0.0)

    def residual_tolerance(self, scale: float) -> float:
        return 20.0 * (self.h**2 + self.dt**2) * scale


def asian_call_functional(sigma: float, strike: float, horizon: float = 1.0,
                          scale: float = 100.0, **grid) -> AugmentedFunctional:
    value = AsianCallValue(sigma, strike, horizon, **grid)
    return AugmentedFunctional(
        StateKind.INTEGRAL, value, value.payoff, horizon, 1, Flavor.POSITIVE, scale,
        value.residual_tolerance(scale), metadata={"sigma": sigma, "strike": strike,
                                                    "value": value})


def lookback_reduced(tau, y, sigma: float) -> np.ndarray:
    """``G(tau, y)`` with ``u = x G(T - t, log(m / x))`` for ``H = max X``.

    ``G = e^y N(w2) + N(-w1) (1 - y + c) + s phi(w1)`` with ``s = sigma sqrt(tau)``,
    ``c = s**2 / 2``, ``w1 = (y - c) / s`` and ``w2 = (y + c) / s``.
    """
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    tau, y = np.broadcast_arrays(tau, y)
    out = np.exp(y).astype(float)
    live = tau > 0
    if np.any(live):
        s = sigma * np.sqrt(tau[live])
        yl = y[live]
        c = 0.5 * s**2
        w1 = (yl - c) / s
        w2 = (yl + c) / s
        out = out.copy()
        out[live] = np.exp(yl) * norm.cdf(w2) + norm.cdf(-w1) * (1 - yl + c) + s * norm.pdf(w1)
    return out


def lookback_functional(sigma: float, horizon: float = 1.0,
                        scale: float = 100.0) -> AugmentedFunctional:
    """``F_t = E[max_{r <= T} X(r) | X_t]`` under ``dX = sigma X dW``."""

    def value(t, x, m):
        x = np.asarray(x, dtype=float)[..., 0]
        m = np.maximum(np.asarray(m, dtype=float), x)
        tau = horizon - np.asarray(t, float)
        return np.where(tau > 0, x * lookback_reduced(tau, np.log(m / x), sigma), m)

    def payoff(x, m):
        return np.asarray(m, dtype=float)

    # The closed form solves the equation exactly; what remains is stencil error.
    tol = 1e-4 * scale
    return AugmentedFunctional(StateKind.MAXIMUM, value, payoff, horizon, 1, Flavor.POSITIVE,
                               scale, tol, metadata={"sigma": sigma})


def lookback_neumann_defect(sigma: float, horizon: float, t: float, x: float,
                            dm: float = 1e-4) -> float:
    """``du/dm`` at the diagonal ``m = x`` by a one-sided difference; should be ~0."""
    F = lookback_functional(sigma, horizon)
    t_, x_ = np.array([t]), np.array([[x]])
    up = F.value_map(t_, x_, np.array([x + dm]))[0]
    at = F.value_map(t_, x_, np.array([x]))[0]
    return float((up - at) / dm)


__all__ = [
    "AsianCallValue",
    "AugmentedFunctional",
    "FTVPReport",
    "StateKind",
    "asian_call_functional",
    "constant_functional",
    "ftvp_residual",
    "functional_hedge_check",
    "grid_functional",
    "horizontal_derivative",
    "integral_functional",
    "lookback_functional",
    "lookback_neumann_defect",
    "lookback_reduced",
    "spot_functional",
    "vertical_derivative",
]
