"""Finite-difference solver for backward parabolic terminal-value problems.

The generator is ``L v = 1/2 sum a_ij(t, x) d_ij v`` on the whole space and
``L+ v = 1/2 sum a_ij(t, x) x_i x_j d_ij v`` on the positive orthant.  Positive
problems are solved in log coordinates where the generator becomes
``1/2 sum a_ij(t, e^y) d_ij + sum b_i d_i`` with ``b_i = -a_ii(t, e^y) / 2``.

Schemes: Crank-Nicolson with two implicit half steps at the start (d = 1),
explicit Euler under a CFL guard (d = 2).  Boundary nodes keep their terminal
values, which is the zero-second-derivative condition in original coordinates
(the generator has no first-order part there).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from .pathcalc import Flavor


class LatticeError(ValueError):
    pass


class ModelValidationError(LatticeError):
    pass


class CFLError(LatticeError):
    pass


class GridDomainError(LatticeError):
    pass


# -- local volatility models ---------------------------------------------------


@dataclass(frozen=True)
class LocalVolModel:
    """Covariance field ``a(t, x)`` for d in {1, 2}.

    ``a_fn(t, x)`` takes ``t`` broadcastable against ``x[..., 0]`` and returns
    shape ``x.shape[:-1] + (d, d)``.  Use the ``constant``, ``separable`` and
    ``tabulated`` constructors rather than building this directly.
    """

    dim: int
    flavor: Flavor
    family: str
    a_fn: Callable = field(repr=False)
    bound: float
    lambda_min: float
    time_homogeneous: bool = False
    constant_matrix: np.ndarray | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ModelValidationError(f"dimension must be 1 or 2, got {self.dim}")
        object.__setattr__(self, "flavor", Flavor(self.flavor))
        if not self.lambda_min > 0:
            raise ModelValidationError("lambda_min must be positive")
        if not self.bound > 0:
            raise ModelValidationError("bound must be positive")

    # constructors -----------------------------------------------------------
    @classmethod
    def constant(cls, matrix, flavor=Flavor.WHOLE, bound=None, lambda_min=None) -> "LocalVolModel":
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        d = A.shape[0]
        if A.shape != (d, d):
            raise ModelValidationError("covariance must be square")
        if not np.allclose(A, A.T, rtol=0, atol=1e-14):
            raise ModelValidationError("covariance must be symmetric")
        eig = float(np.linalg.eigvalsh(A)[0])
        if eig <= 0:
            raise ModelValidationError(f"covariance is not positive definite (lambda_min={eig})")
        bound = float(np.max(np.abs(A))) if bound is None else float(bound)
        lambda_min = eig if lambda_min is None else float(lambda_min)
        A = A.copy()
        A.setflags(write=False)

        def a_fn(t, x):
            x = np.asarray(x)
            return np.broadcast_to(A, x.shape[:-1] + (d, d))

        m = cls(d, flavor, "constant", a_fn, bound, lambda_min, True, A, {"matrix": A.tolist()})
        m.validate_constant()
        return m

    @classmethod
    def separable(cls, sigmas: Sequence[Callable], correlation=None, flavor=Flavor.WHOLE,
                  bound: float = 1.0, lambda_min: float = 1e-8,
                  time_homogeneous: bool = False) -> "LocalVolModel":
        """``a_ij(t, x) = rho_ij sigma_i(t, x_i) sigma_j(t, x_j)``."""
        d = len(sigmas)
        rho = np.eye(d) if correlation is None else np.atleast_2d(np.asarray(correlation, float))
        if rho.shape != (d, d) or not np.allclose(rho, rho.T) or not np.allclose(np.diag(rho), 1):
            raise ModelValidationError("correlation must be a symmetric unit-diagonal matrix")

        def a_fn(t, x):
            x = np.asarray(x, dtype=float)
            s = np.stack([np.asarray(sigmas[i](t, x[..., i]), float) * np.ones(x.shape[:-1])
                          for i in range(d)], axis=-1)
            return rho * s[..., :, None] * s[..., None, :]

        return cls(d, flavor, "separable", a_fn, bound, lambda_min, time_homogeneous,
                   params={"correlation": rho.tolist()})

    @classmethod
    def tabulated(cls, t_grid, x_grids: Sequence, table, flavor=Flavor.WHOLE,
                  bound: float | None = None, lambda_min: float = 1e-8) -> "LocalVolModel":
        """Linear interpolation of tabulated entries over ``(t, x_1, ..., x_d)``.

        For d = 1 ``table`` has shape ``(nt, nx)`` (bilinear in ``(t, x)``);
        for d = 2 shape ``(nt, nx1, nx2, 2, 2)``.  Queries outside the table are
        clamped to its edges.
        """
        d = len(x_grids)
        tab = np.asarray(table, dtype=float)
        axes = (np.asarray(t_grid, float),) + tuple(np.asarray(g, float) for g in x_grids)
        if d == 1 and tab.ndim == 2:
            tab = tab[..., None, None]
        if tab.shape != tuple(len(a) for a in axes) + (d, d):
            raise ModelValidationError(f"table shape {tab.shape} does not match the grids")
        if not np.allclose(tab, np.swapaxes(tab, -1, -2)):
            raise ModelValidationError("tabulated covariance must be symmetric")
        interp = RegularGridInterpolator(axes, tab, method="linear")
        lo = np.array([a[0] for a in axes])
        hi = np.array([a[-1] for a in axes])

        def a_fn(t, x):
            x = np.asarray(x, dtype=float)
            tt = np.broadcast_to(np.asarray(t, float), x.shape[:-1])
            pts = np.concatenate([tt[..., None], x], axis=-1)
            pts = np.clip(pts, lo, hi)
            return interp(pts.reshape(-1, d + 1)).reshape(x.shape[:-1] + (d, d))

        bound = float(np.max(np.abs(tab))) if bound is None else float(bound)
        return cls(d, flavor, "tabulated", a_fn, bound, lambda_min, len(axes[0]) == 1)

    # queries -----------------------------------------------------------------
    def a(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            x = np.asarray(x, dtype=float)[..., None]
        return np.asarray(self.a_fn(t, x), dtype=float)

    def covariation_density(self, t, x) -> np.ndarray:
        """``a_ij`` (whole space) or ``a_ij x_i x_j`` (positive) at ``(t, x)``."""
        x = np.asarray(x, dtype=float)
        A = self.a(t, x)
        if self.flavor is Flavor.POSITIVE:
            return A * x[..., :, None] * x[..., None, :]
        return A

    def scaled(self, kappa: float) -> "LocalVolModel":
        """The model with covariance ``kappa * a``."""
        if not kappa > 0:
            raise ModelValidationError("kappa must be positive")
        base = self.a_fn
        cm = None if self.constant_matrix is None else self.constant_matrix * kappa
        return LocalVolModel(self.dim, self.flavor, self.family, lambda t, x: kappa * base(t, x),
                             self.bound * kappa, self.lambda_min * kappa, self.time_homogeneous,
                             cm, dict(self.params, kappa=kappa))

    def validate_constant(self) -> None:
        A = self.constant_matrix
        if np.max(np.abs(A)) > self.bound * (1 + 1e-12):
            raise ModelValidationError("covariance exceeds declared bound")
        if np.linalg.eigvalsh(A)[0] < self.lambda_min * (1 - 1e-12):
            raise ModelValidationError("covariance eigenvalue below declared floor")

    def validate(self, lower, upper, t_max: float, points: int = 101) -> dict:
        """Sample symmetry, eigenvalue floor and bound on a probe grid.

        ``lower``/``upper`` are per-coordinate bounds in original coordinates.
        The probe has ``points`` nodes per space axis and per the time axis.
        """
        if self.constant_matrix is not None:
            self.validate_constant()
            eig = float(np.linalg.eigvalsh(self.constant_matrix)[0])
            return {"lambda_min": eig, "max_abs": float(np.max(np.abs(self.constant_matrix)))}
        lower = np.broadcast_to(np.asarray(lower, float), (self.dim,))
        upper = np.broadcast_to(np.asarray(upper, float), (self.dim,))
        axes = [np.linspace(lo, hi, points) for lo, hi in zip(lower, upper)]
        ts = np.linspace(0.0, t_max, points if self.dim == 1 else 11)
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        lam, amax = np.inf, 0.0
        for t in ts:
            A = self.a(t, X)
            if not np.all(np.isfinite(A)):
                raise ModelValidationError(f"non-finite covariance at t={t}")
            if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=1e-12, atol=1e-14):
                raise ModelValidationError(f"covariance not symmetric at t={t}")
            lam = min(lam, float(np.min(np.linalg.eigvalsh(A)[..., 0])))
            amax = max(amax, float(np.max(np.abs(A))))
        if lam < self.lambda_min * (1 - 1e-12):
            raise ModelValidationError(f"sampled eigenvalue {lam} below floor {self.lambda_min}")
        if amax > self.bound * (1 + 1e-12):
            raise ModelValidationError(f"sampled |a_ij| = {amax} exceeds bound {self.bound}")
        return {"lambda_min": lam, "max_abs": amax}


# -- problems in solver coordinates ----------------------------------------------


@dataclass(frozen=True)
class DiffusionProblem:
    """``dv/dt + 1/2 a : D^2 v + b . D v = 0`` in solver coordinates ``y``.

    ``log_space`` records that ``y = log x``; results are pulled back through
    ``exp`` when queried in original coordinates.
    """

    dim: int
    covariance: Callable  # (t, y[..., d]) -> (..., d, d)
    drift: Callable | None  # (t, y[..., d]) -> (..., d), or None
    terminal: Callable  # y[..., d] -> (...)
    log_space: bool = False
    time_homogeneous: bool = False
    bound: float = 1.0


def whole_space_problem(model: LocalVolModel, terminal: Callable) -> DiffusionProblem:
    if model.flavor is not Flavor.WHOLE:
        raise LatticeError("whole_space_problem needs a whole-space model")
    return DiffusionProblem(model.dim, model.a, None, terminal, False, model.time_homogeneous,
                            model.bound)


def log_transform(model: LocalVolModel, terminal: Callable) -> DiffusionProblem:
    """Rewrite a positive-orthant problem on the whole space via ``x = exp(y)``.

    Returns covariance ``a(t, e^y)``, drift ``-a_ii(t, e^y) / 2`` and terminal
    data ``f(e^y)``.  The result carries ``log_space=False``: solving it gives
    the whole-space function ``v~(t, y) = v(t, e^y)`` directly.
    """
    if model.flavor is not Flavor.POSITIVE:
        raise LatticeError("log_transform requires a positive-flavor model")

    def cov(t, y):
        return model.a(t, np.exp(y))

    def drift(t, y):
        return -0.5 * np.diagonal(model.a(t, np.exp(y)), axis1=-2, axis2=-1)

    def term(y):
        return terminal(np.exp(y))

    return DiffusionProblem(model.dim, cov, drift, term, False, model.time_homogeneous, model.bound)


def positive_problem(model: LocalVolModel, terminal: Callable) -> DiffusionProblem:
    p = log_transform(model, terminal)
    return DiffusionProblem(p.dim, p.covariance, p.drift, p.terminal, True, p.time_homogeneous,
                            p.bound)


def problem_for(model: LocalVolModel, terminal: Callable) -> DiffusionProblem:
    if model.flavor is Flavor.POSITIVE:
        return positive_problem(model, terminal)
    return whole_space_problem(model, terminal)


# -- grids -----------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid in solver coordinates plus a time-step rule.

    ``bounds`` holds one ``(lo, hi)`` pair per axis in solver coordinates (log
    space for positive problems).  ``n_time`` is the number of steps per unit
    time; ``None`` picks the smallest count that keeps the scheme monotone,
    refusing counts above ``max_steps``.
    """

    bounds: tuple
    n_space: int = 801
    n_time: int | None = None
    min_steps: int = 20
    fixing_points: int = 33
    max_steps: int = 200_000

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if any(not hi > lo for lo, hi in b):
            raise LatticeError(f"invalid grid bounds {b}")
        if self.n_space < 5:
            raise LatticeError("need at least 5 nodes per axis")
        object.__setattr__(self, "bounds", b)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def axes(self) -> tuple:
        return tuple(np.linspace(lo, hi, self.n_space) for lo, hi in self.bounds)

    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (self.n_space - 1) for lo, hi in self.bounds])

    @classmethod
    def around(cls, spot, model: LocalVolModel, horizon: float, n_space: int = 801,
               n_time: int | None = None, width_sd: float = 6.0, fixing_points: int = 33,
               min_steps: int = 20) -> "GridSpec":
        """Grid centred on ``spot`` covering ``width_sd`` standard deviations.

        Whole space: ``x +- width_sd * sqrt(bound * horizon)``; positive: the
        same in log space.
        """
        spot = np.broadcast_to(np.asarray(spot, dtype=float), (model.dim,))
        half = width_sd * math.sqrt(model.bound * horizon)
        if model.flavor is Flavor.POSITIVE:
            if np.any(spot <= 0):
                raise LatticeError("positive-flavor spot must be positive")
            centre = np.log(spot)
        else:
            centre = spot
        return cls(tuple((c - half, c + half) for c in centre), n_space, n_time, min_steps,
                   fixing_points)

    def contains(self, y) -> bool:
        y = np.atleast_1d(np.asarray(y, float))
        return all(lo <= v <= hi for v, (lo, hi) in zip(y, self.bounds))


def default_steps(problem: DiffusionProblem, grid: GridSpec, tau: float, t_start: float) -> int:
    """Smallest step count keeping the scheme monotone on this grid."""
    h = grid.spacing()
    amax = _max_covariance(problem, grid, t_start, t_start + tau)
    if problem.dim == 1:
        dt = 2.0 * h[0] ** 2 / amax
    else:
        dt = float(np.min(h) ** 2 / (2 * problem.dim * amax))
    return max(grid.min_steps, int(math.ceil(tau / dt * (1 + 1e-12))))


def _max_covariance(problem: DiffusionProblem, grid: GridSpec, t0: float, t1: float) -> float:
    Y = np.stack(np.meshgrid(*grid.axes(), indexing="ij"), axis=-1)
    if problem.dim == 2:
        Y = Y[::4, ::4]
    ts = [t0] if problem.time_homogeneous else np.linspace(t0, t1, 5)
    return max(float(np.max(np.abs(problem.covariance(t, Y)))) for t in ts)


# -- solutions -------------------------------------------------------------------


@dataclass
class GridSolution:
    """Space-time values of one terminal-value solve on ``[t_start, t_end]``.

    ``values[m]`` is the slice at ``times[m]``; ``values[-1]`` equals the
    terminal data at the nodes.  ``axes`` are in solver coordinates.
    """

    problem: DiffusionProblem
    axes: tuple
    times: np.ndarray
    values: np.ndarray
    flavor: Flavor = Flavor.WHOLE
    n_steps: int = 0
    _grad: np.ndarray | None = field(default=None, repr=False)
    _pde: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    @property
    def log_space(self) -> bool:
        return self.problem.log_space

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / max(self.n_steps, 1)

    def nodes(self) -> np.ndarray:
        """Grid nodes in original coordinates, shape ``(n1[, n2], d)``."""
        Y = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)
        return np.exp(Y) if self.log_space else Y

    def initial(self) -> np.ndarray:
        return self.values[0]

    # interpolation -----------------------------------------------------------
    def _to_solver(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            x = x[..., None]
        if self.log_space:
            if np.any(x <= 0):
                raise GridDomainError("positive-flavor query with non-positive coordinate")
            return np.log(x)
        return x

    def _space_weights(self, y, clamp: bool):
        idx, wts = [], []
        for k, ax in enumerate(self.axes):
            h = ax[1] - ax[0]
            u = (y[..., k] - ax[0]) / h
            n = ax.size
            if not clamp and (np.any(u < -1e-9) or np.any(u > n - 1 + 1e-9)):
                raise GridDomainError("query outside the grid")
            u = np.clip(u, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(u).astype(int), n - 2)
            idx.append(i0)
            wts.append(u - i0)
        return idx, wts

    def _time_weights(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, abs(self.t_end))
        if np.any(t < self.t_start - tol) or np.any(t > self.t_end + tol):
            raise GridDomainError(f"time outside [{self.t_start}, {self.t_end}]")
        if self.times.size == 1:
            return np.zeros(t.shape, int), np.zeros(t.shape)
        u = (t - self.t_start) / (self.t_end - self.t_start) * (self.times.size - 1)
        u = np.clip(u, 0.0, self.times.size - 1.0)
        m0 = np.minimum(np.floor(u).astype(int), self.times.size - 2)
        return m0, u - m0

    def _interp(self, field_, t, y, clamp=False):
        """Linear in time, (bi)linear in space, of ``field_[m, i(, j), ...]``."""
        m0, wt = self._time_weights(t)
        idx, wts = self._space_weights(y, clamp)
        shape = np.broadcast_shapes(np.shape(m0), y.shape[:-1])
        m0 = np.broadcast_to(m0, shape)
        wt = np.broadcast_to(wt, shape)
        extra = field_.shape[1 + self.dim:]
        out = np.zeros(shape + extra)
        m1 = np.minimum(m0 + 1, field_.shape[0] - 1)
        for tm, tw in ((m0, 1 - wt), (m1, wt)):
            if self.dim == 1:
                i, w = idx[0], wts[0]
                part = (field_[tm, i] * _bc(1 - w, extra) + field_[tm, i + 1] * _bc(w, extra))
            else:
                (i, j), (wi, wj) = idx, wts
                part = (field_[tm, i, j] * _bc((1 - wi) * (1 - wj), extra)
                        + field_[tm, i + 1, j] * _bc(wi * (1 - wj), extra)
                        + field_[tm, i, j + 1] * _bc((1 - wi) * wj, extra)
                        + field_[tm, i + 1, j + 1] * _bc(wi * wj, extra))
            out += part * _bc(tw, extra)
        return out

    def value(self, t, x, clamp: bool = False) -> np.ndarray:
        return self._interp(self.values, t, self._to_solver(x), clamp)

    def gradient_field(self) -> np.ndarray:
        """Central-difference gradient in solver coordinates at every node."""
        if self._grad is None:
            h = self.spacing
            if self.dim == 1:
                g = np.gradient(self.values, h[0], axis=1, edge_order=2)[..., None]
            else:
                g = np.stack(np.gradient(self.values, h[0], h[1], axis=(1, 2), edge_order=2),
                             axis=-1)
            self._grad = g
        return self._grad

    def gradient(self, t, x, clamp: bool = False) -> np.ndarray:
        """Spatial gradient in original coordinates (chain rule on log grids)."""
        y = self._to_solver(x)
        g = self._interp(self.gradient_field(), t, y, clamp)
        if self.log_space:
            g = g / np.exp(y)
        return g

    def operator(self, slice_values: np.ndarray, t: float) -> np.ndarray:
        """``L`` applied by central differences to one slice (zeros on the boundary)."""
        return _apply_operator(self.problem, self.axes, slice_values, t)

    def pde_term_field(self) -> np.ndarray:
        """``dv/dt + L v`` recomputed at every stored node by central differences."""
        if self._pde is None:
            V = self.values
            out = np.zeros_like(V)
            if self.times.size >= 3:
                dvdt = np.gradient(V, self.times, axis=0, edge_order=2)
            elif self.times.size == 2:
                dvdt = np.repeat(((V[1] - V[0]) / (self.times[1] - self.times[0]))[None], 2, 0)
            else:
                dvdt = np.zeros_like(V)
            for m, t in enumerate(self.times):
                out[m] = dvdt[m] + self.operator(V[m], float(t))
            interior = _interior_mask(V.shape[1:])
            out[:, ~interior] = 0.0
            self._pde = out
        return self._pde

    def pde_term(self, t, x, clamp: bool = False) -> np.ndarray:
        return self._interp(self.pde_term_field(), t, self._to_solver(x), clamp)

    def pde_residual(self, skip_fraction: float = 0.1, margin: int = 1) -> float:
        """Max interior ``|dv/dt + L v|`` outside the terminal layer.

        Slices with ``t > t_end - skip_fraction * (t_end - t_start)`` are left
        out: non-smooth terminal data makes the recomputed residual blow up
        there no matter how good the scheme is.  Pass ``0`` for smooth data.
        """
        field_ = self.pde_term_field()
        cut = self.t_end - skip_fraction * (self.t_end - self.t_start)
        keep = self.times <= cut + 1e-12
        if skip_fraction > 0:
            keep &= self.times < self.t_end
        inner = field_[keep]
        if margin > 0:
            sl = (slice(None),) + (slice(margin, -margin),) * self.dim
            inner = inner[sl]
        return float(np.max(np.abs(inner))) if inner.size else 0.0

    def residual_tolerance(self, scale: float | None = None) -> float:
        """``10 (h^2 + dt^2) scale`` with ``scale = max(1, max |f|)`` by default."""
        if scale is None:
            scale = max(1.0, float(np.max(np.abs(self.values[-1]))))
        h = float(np.max(self.spacing))
        return 10.0 * (h**2 + self.dt**2) * scale

    def growth_constant(self, p: float) -> tuple[float, float]:
        """``(c, c~)``: sup of ``|f|`` and ``|v|`` over ``1 + |x|**p`` on the grid."""
        X = self.nodes()
        w = 1.0 + np.linalg.norm(X, axis=-1) ** p
        c_f = float(np.max(np.abs(self.values[-1]) / w))
        c_v = float(np.max(np.abs(self.values) / w[None]))
        return c_f, c_v

    def to_csv(self, target: str | Path, time_stride: int | None = None) -> None:
        """Write ``t,x1[,x2],v`` rows in original coordinates."""
        m = self.times.size
        stride = time_stride or max(1, (m - 1) // 50)
        keep = sorted(set(range(0, m, stride)) | {m - 1})
        X = self.nodes().reshape(-1, self.dim)
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"x{k + 1}" for k in range(self.dim)] + ["v"])
            for mi in keep:
                t = repr(float(self.times[mi]))
                for x, v in zip(X, self.values[mi].reshape(-1)):
                    w.writerow([t] + [repr(float(c)) for c in x] + [repr(float(v))])


def _bc(w, extra):
    return np.reshape(w, np.shape(w) + (1,) * len(extra))


def _interior_mask(shape) -> np.ndarray:
    mask = np.zeros(shape, bool)
    mask[(slice(1, -1),) * len(shape)] = True
    return mask


def _apply_operator(problem: DiffusionProblem, axes, V: np.ndarray, t: float) -> np.ndarray:
    Y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    A = problem.covariance(t, Y)
    B = problem.drift(t, Y) if problem.drift is not None else None
    h = [ax[1] - ax[0] for ax in axes]
    out = np.zeros_like(V)
    if len(axes) == 1:
        c = slice(1, -1)
        vyy = (V[2:] - 2 * V[c] + V[:-2]) / h[0] ** 2
        out[c] = 0.5 * A[c, 0, 0] * vyy
        if B is not None:
            out[c] += B[c, 0] * (V[2:] - V[:-2]) / (2 * h[0])
        return out
    c = (slice(1, -1), slice(1, -1))
    v11 = (V[2:, 1:-1] - 2 * V[c] + V[:-2, 1:-1]) / h[0] ** 2
    v22 = (V[1:-1, 2:] - 2 * V[c] + V[1:-1, :-2]) / h[1] ** 2
    v12 = (V[2:, 2:] - V[2:, :-2] - V[:-2, 2:] + V[:-2, :-2]) / (4 * h[0] * h[1])
    Ac = A[c]
    out[c] = 0.5 * Ac[..., 0, 0] * v11 + Ac[..., 0, 1] * v12 + 0.5 * Ac[..., 1, 1] * v22
    if B is not None:
        Bc = B[c]
        out[c] += Bc[..., 0] * (V[2:, 1:-1] - V[:-2, 1:-1]) / (2 * h[0])
        out[c] += Bc[..., 1] * (V[1:-1, 2:] - V[1:-1, :-2]) / (2 * h[1])
    return out


# -- solvers ----------------------------------------------------------------------


def _terminal_values(problem: DiffusionProblem, axes, terminal_values) -> np.ndarray:
    shape = tuple(a.size for a in axes)
    if terminal_values is not None:
        f = np.asarray(terminal_values, dtype=float)
        if f.shape != shape:
            raise LatticeError(f"terminal values have shape {f.shape}, grid is {shape}")
        return f.copy()
    Y = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return np.asarray(problem.terminal(Y), dtype=float).reshape(shape)


def _tridiag_coeffs(problem, y, t, h):
    A = problem.covariance(t, y[:, None])[:, 0, 0]
    alpha = 0.5 * A / h**2
    if problem.drift is not None:
        beta = problem.drift(t, y[:, None])[:, 0] / (2 * h)
    else:
        beta = np.zeros_like(y)
    lower = alpha - beta  # coefficient of v[i-1]
    diag = -2 * alpha
    upper = alpha + beta  # coefficient of v[i+1]
    lower[0] = lower[-1] = diag[0] = diag[-1] = upper[0] = upper[-1] = 0.0
    return lower, diag, upper


def _apply_tridiag(coeffs, v):
    lower, diag, upper = coeffs
    out = diag * v
    out[1:] += lower[1:] * v[:-1]
    out[:-1] += upper[:-1] * v[1:]
    return out


def _implicit_matrix(coeffs, theta_dt):
    lower, diag, upper = coeffs
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = -theta_dt * upper[:-1]
    ab[1] = 1.0 - theta_dt * diag
    ab[2, :-1] = -theta_dt * lower[1:]
    return ab


def _solve_1d(problem, axes, f, times, rannacher: bool, keep_all: bool):
    y = axes[0]
    h = y[1] - y[0]
    n_steps = times.size - 1
    V = np.empty((times.size if keep_all else 1, y.size))
    v = f.copy()
    if keep_all:
        V[-1] = v
    cache = {}

    def coeffs(t):
        if problem.time_homogeneous:
            if "c" not in cache:
                cache["c"] = _tridiag_coeffs(problem, y, t, h)
            return cache["c"]
        return _tridiag_coeffs(problem, y, t, h)

    def step(v, t_hi, t_lo, theta):
        dt = t_hi - t_lo
        c_hi, c_lo = coeffs(t_hi), coeffs(t_lo)
        rhs = v + (1 - theta) * dt * _apply_tridiag(c_hi, v) if theta < 1 else v.copy()
        key = ("ab", theta, dt) if problem.time_homogeneous else None
        if key is not None and key in cache:
            ab = cache[key]
        else:
            ab = _implicit_matrix(c_lo, theta * dt)
            if key is not None:
                cache[key] = ab
        return solve_banded((1, 1), ab, rhs, overwrite_b=True, check_finite=False)

    for m in range(n_steps, 0, -1):
        t_hi, t_lo = times[m], times[m - 1]
        if rannacher and m == n_steps:
            mid = 0.5 * (t_hi + t_lo)
            v = step(v, t_hi, mid, 1.0)
            v = step(v, mid, t_lo, 1.0)
        else:
            v = step(v, t_hi, t_lo, 0.5)
        if keep_all:
            V[m - 1] = v
    if not keep_all:
        V[0] = v
    return V


def _solve_2d(problem, axes, f, times, keep_all: bool):
    V = np.empty((times.size if keep_all else 1,) + f.shape)
    v = f.copy()
    if keep_all:
        V[-1] = v
    for m in range(times.size - 1, 0, -1):
        dt = times[m] - times[m - 1]
        v = v + dt * _apply_operator(problem, axes, v, float(times[m]))
        if keep_all:
            V[m - 1] = v
    if not keep_all:
        V[0] = v
    return V


def solve_problem(problem: DiffusionProblem, t_start: float, t_end: float, grid: GridSpec,
                  terminal_values=None, keep: str = "all", rannacher: bool = True,
                  flavor: Flavor | None = None) -> GridSolution:
    """Solve ``problem`` backward from ``t_end`` to ``t_start`` on ``grid``."""
    if not t_start < t_end:
        raise LatticeError(f"need t_start < t_end, got {t_start}, {t_end}")
    if grid.dim != problem.dim:
        raise LatticeError(f"grid has {grid.dim} axes, problem has dimension {problem.dim}")
    axes = grid.axes()
    f = _terminal_values(problem, axes, terminal_values)
    if not np.all(np.isfinite(f)):
        raise LatticeError("terminal data is not finite on the grid")
    tau = t_end - t_start
    h = grid.spacing()
    if grid.n_time is None:
        n_steps = default_steps(problem, grid, tau, t_start)
        if n_steps > grid.max_steps:
            raise LatticeError(f"the monotone step rule needs {n_steps} steps (max_steps="
                               f"{grid.max_steps}); widen the grid or set n_time")
    else:
        n_steps = max(grid.min_steps, int(math.ceil(grid.n_time * tau - 1e-9)))
    if problem.dim == 2:
        amax = _max_covariance(problem, grid, t_start, t_end)
        dt_cfl = float(np.min(h) ** 2 / (2 * problem.dim * amax))
        if tau / n_steps > dt_cfl * (1 + 1e-12):
            raise CFLError(f"dt={tau / n_steps:.3g} exceeds the explicit limit {dt_cfl:.3g}")
    times = np.linspace(t_start, t_end, n_steps + 1)
    keep_all = keep == "all"
    if problem.dim == 1:
        V = _solve_1d(problem, axes, f, times, rannacher, keep_all)
    elif problem.dim == 2:
        V = _solve_2d(problem, axes, f, times, keep_all)
    else:
        raise LatticeError("only d = 1 and d = 2 grids are supported")
    if not keep_all:
        times = times[:1]
    if not np.all(np.isfinite(V)):
        raise LatticeError("solver produced non-finite values")
    if flavor is None:
        flavor = Flavor.POSITIVE if problem.log_space else Flavor.WHOLE
    return GridSolution(problem, axes, times, V, flavor, n_steps)


def solve_tvp(model: LocalVolModel, terminal, t_start: float, t_end: float, grid: GridSpec,
              evaluation=None, keep: str = "all", terminal_values=None,
              validate: bool = True) -> GridSolution:
    """Solve the terminal-value problem for ``model`` with payoff ``terminal``.

    ``terminal`` is a vectorised function of original coordinates ``x[..., d]``
    (ignored when ``terminal_values`` on the grid are supplied).  ``evaluation``
    optionally names the spot that must lie inside the grid.
    """
    if evaluation is not None:
        y = np.atleast_1d(np.asarray(evaluation, float))
        if model.flavor is Flavor.POSITIVE:
            if np.any(y <= 0):
                raise GridDomainError("positive-flavor evaluation point must be positive")
            y = np.log(y)
        if not grid.contains(y):
            raise GridDomainError(f"evaluation point {evaluation} is outside the grid")
    if validate:
        lo = np.array([b[0] for b in grid.bounds])
        hi = np.array([b[1] for b in grid.bounds])
        if model.flavor is Flavor.POSITIVE:
            lo, hi = np.exp(lo), np.exp(hi)
        model.validate(lo, hi, t_end)
    problem = problem_for(model, terminal if terminal is not None else (lambda x: 0.0 * x[..., 0]))
    return solve_problem(problem, t_start, t_end, grid, terminal_values, keep)


# -- checks -------------------------------------------------------------------------


@dataclass(frozen=True)
class MaxPrincipleReport:
    min_value: float
    tolerance: float
    passed: bool
    positivity_checked: bool
    positivity_passed: bool
    min_interior_initial: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def maximum_principle_check(model: LocalVolModel, terminal, t_start: float, t_end: float,
                            grid: GridSpec, terminal_values=None) -> MaxPrincipleReport:
    """Check ``v >= -eps`` for nonnegative data and strict positivity propagation.

    ``eps = 1e-8 * max |f|``.  If ``f`` is positive at some interior node the
    initial slice must be strictly positive at every interior node.
    """
    problem = problem_for(model, terminal if terminal is not None else (lambda x: 0.0 * x[..., 0]))
    f = _terminal_values(problem, grid.axes(), terminal_values)
    if np.any(f < 0):
        raise LatticeError("maximum principle check needs nonnegative terminal data")
    sol = solve_tvp(model, terminal, t_start, t_end, grid, terminal_values=f)
    fmax = float(np.max(np.abs(f)))
    tol = 1e-8 * fmax
    vmin = float(np.min(sol.values))
    interior = _interior_mask(f.shape)
    checked = bool(np.any(f[interior] > 0))
    init = sol.values[0][interior]
    min_init = float(np.min(init))
    positivity = bool(np.all(init > 0)) if checked else True
    return MaxPrincipleReport(vmin, tol, vmin >= -tol, checked, positivity, min_init)


@dataclass(frozen=True)
class MartingaleReport:
    estimate: float
    start_value: float
    difference: float
    std_error: float
    tolerance: float
    passed: bool
    n_paths: int


def martingale_check(model: LocalVolModel, solution, n_paths: int, t0: float, t1: float,
                     x0, seed: int = 0, steps: int = 64,
                     grid_tolerance: float = 1e-3) -> MartingaleReport:
    """Monte-Carlo check that ``v(t, S(t))`` has no drift between ``t0`` and ``t1``.

    Paths start from ``x0`` at ``t0`` and follow the model's Euler scheme.
    PASS iff ``|E[v(t1, S(t1))] - v(t0, x0)| <= 3 SE + grid_tolerance``.
    """
    from .paths import simulate_terminal

    if n_paths < 100:
        raise LatticeError("martingale_check needs at least 100 paths")
    if not t0 < t1:
        raise LatticeError("need t0 < t1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    ST = simulate_terminal(model, x0, t0, t1, n_paths, steps, seed)
    vals = np.asarray(solution.value(np.full(n_paths, t1), ST), dtype=float)
    start = float(np.asarray(solution.value(t0, x0[None]))[0])
    est = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_paths))
    diff = est - start
    tol = 3 * se + grid_tolerance
    return MartingaleReport(est, start, diff, se, tol, abs(diff) <= tol, n_paths)
