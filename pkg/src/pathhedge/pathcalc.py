"""Sampled paths on dyadic partitions, pathwise covariation and Föllmer sums.

Every object here lives on the uniform dyadic hierarchy ``T_n = {k T / 2**n}``.
A :class:`SampledPath` stores its values on the finest level ``T_L``; coarser
levels are exact sub-samples, so nothing is ever interpolated at a node.

Curve convention: the value of a cumulative sum at node ``t_k`` collects the
increments over ``[t_j, t_{j+1}]`` with ``t_{j+1} <= t_k``.  With this
convention ``follmer_integral`` of a constant unit integrand returns
``S(t) - S(0)`` exactly and the discrete Itô identity holds node-wise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np


class Flavor(str, Enum):
    """Whole-space (Bachelier type) or strictly positive (Black-Scholes type)."""

    WHOLE = "whole"
    POSITIVE = "positive"


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class PartitionHierarchy:
    """Refining dyadic partitions of ``[0, horizon]`` up to ``max_level``."""

    horizon: float
    max_level: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise PathError(f"horizon must be positive, got {self.horizon}")
        if self.max_level < 1:
            raise PathError(f"max_level must be >= 1, got {self.max_level}")

    def _check(self, level: int) -> None:
        if level < 0 or level > self.max_level:
            raise PathError(f"level {level} outside 0..{self.max_level}")

    def size(self, level: int) -> int:
        self._check(level)
        return 2**level + 1

    def times(self, level: int) -> np.ndarray:
        self._check(level)
        # k * T / 2**n is exact in binary for dyadic T
        return np.arange(2**level + 1) * (self.horizon / 2**level)

    def mesh(self, level: int) -> float:
        self._check(level)
        return self.horizon / 2**level

    def stride(self, level: int) -> int:
        """Index step on the finest level between consecutive nodes of ``level``."""
        self._check(level)
        return 2 ** (self.max_level - level)

    def index(self, t: float, level: int | None = None) -> int:
        """Index of ``t`` in ``T_level``; raises if ``t`` is not a node."""
        level = self.max_level if level is None else level
        k = t / self.mesh(level)
        kr = int(round(k))
        if abs(k - kr) > 1e-9 or kr < 0 or kr > 2**level:
            raise PathError(f"t={t} is not a node of level {level}")
        return kr

    def contains(self, t: float, level: int | None = None) -> bool:
        try:
            self.index(t, level)
        except PathError:
            return False
        return True

    def successor(self, t: float, level: int) -> float:
        """``t'``: the next node of ``T_level`` after ``t``; ``T`` maps to itself."""
        k = self.index(t, level)
        if k == 2**level:
            return self.horizon
        return (k + 1) * self.mesh(level)


@dataclass(frozen=True)
class SampledPath:
    """A d-dimensional trajectory stored at every node of ``T_L``.

    ``values`` has shape ``(2**L + 1, d)``.  Between nodes the path is linear.
    """

    hierarchy: PartitionHierarchy
    values: np.ndarray
    flavor: Flavor = Flavor.WHOLE

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != self.hierarchy.size(self.hierarchy.max_level):
            raise PathError(
                f"values must have shape ({self.hierarchy.size(self.hierarchy.max_level)}, d), "
                f"got {np.shape(self.values)}"
            )
        if not np.all(np.isfinite(vals)):
            raise PathError("path values must be finite")
        flavor = Flavor(self.flavor)
        if flavor is Flavor.POSITIVE and np.any(vals <= 0):
            raise PathError("positive-flavor path has a non-positive coordinate")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "flavor", flavor)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def level(self) -> int:
        return self.hierarchy.max_level

    @property
    def horizon(self) -> float:
        return self.hierarchy.horizon

    def times(self, level: int | None = None) -> np.ndarray:
        return self.hierarchy.times(self.level if level is None else level)

    def at_level(self, level: int) -> np.ndarray:
        """Node values on ``T_level`` (a view, no interpolation)."""
        return self.values[:: self.hierarchy.stride(level)]

    def __call__(self, t: float) -> np.ndarray:
        """Evaluate at any ``t`` in ``[0, T]``; exact at nodes, linear between them."""
        if t < 0 or t > self.horizon:
            raise PathError(f"t={t} outside [0, {self.horizon}]")
        h = self.hierarchy.mesh(self.level)
        k = t / h
        kr = int(round(k))
        if abs(k - kr) <= 1e-9:
            return self.values[kr].copy()
        k0 = min(int(np.floor(k)), self.values.shape[0] - 2)
        w = k - k0
        return (1 - w) * self.values[k0] + w * self.values[k0 + 1]

    # -- CSV ---------------------------------------------------------------
    def to_csv(self, path: str | Path) -> None:
        write_path_csv(self, path)

    @classmethod
    def from_csv(cls, path: str | Path, flavor: Flavor | str = Flavor.WHOLE) -> "SampledPath":
        return read_path_csv(path, flavor)


def write_path_csv(path: SampledPath, target: str | Path) -> None:
    d = path.dim
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"S{i + 1}" for i in range(d)])
        for t, row in zip(path.times(), path.values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_path_csv(source: str | Path, flavor: Flavor | str = Flavor.WHOLE) -> SampledPath:
    with open(source, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "t" or any(h != f"S{i + 1}" for i, h in enumerate(header[1:])):
        raise PathError(f"bad path CSV header {header!r}")
    data = np.array([[float(x) for x in r] for r in body])
    n = data.shape[0] - 1
    level = int(round(np.log2(n))) if n > 0 else -1
    if n < 2 or 2**level != n:
        raise PathError(f"path CSV must have 2**L + 1 rows, got {data.shape[0]}")
    horizon = float(data[-1, 0])
    hier = PartitionHierarchy(horizon, level)
    if not np.allclose(data[:, 0], hier.times(level), rtol=0, atol=1e-12 * horizon):
        raise PathError("path CSV times are not the dyadic grid")
    return SampledPath(hier, data[:, 1:], Flavor(flavor))


# -- covariation ----------------------------------------------------------


@dataclass(frozen=True)
class CovariationCurve:
    """Cumulative ``<S_i, S_j>`` at every node of ``T_level``.

    ``values[k, i, j]`` is the level-``level`` sum up to node ``k``.
    ``terminal_by_level[m]`` holds the full-horizon matrix at level ``m + 1``.
    """

    level: int
    times: np.ndarray
    values: np.ndarray
    terminal_by_level: np.ndarray
    cauchy_increment: float | None

    def pair(self, i: int, j: int) -> np.ndarray:
        return self.values[:, i, j]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]


def _increments(path: SampledPath, level: int) -> np.ndarray:
    return np.diff(path.at_level(level), axis=0)


def _cumulative(increments_products: np.ndarray) -> np.ndarray:
    out = np.zeros((increments_products.shape[0] + 1,) + increments_products.shape[1:])
    np.cumsum(increments_products, axis=0, out=out[1:])
    return out


def covariation_sums(path: SampledPath, level: int) -> np.ndarray:
    """Level-``level`` cumulative covariation matrices, shape ``(2**n + 1, d, d)``."""
    dS = _increments(path, level)
    return _cumulative(dS[:, :, None] * dS[:, None, :])


def covariation(path: SampledPath, hierarchy: PartitionHierarchy | None = None,
                level: int | None = None) -> CovariationCurve:
    """Pathwise quadratic covariation along the dyadic partitions."""
    hierarchy = path.hierarchy if hierarchy is None else hierarchy
    if hierarchy != path.hierarchy:
        raise PathError("path is not sampled on the given hierarchy")
    level = hierarchy.max_level if level is None else level
    if level > hierarchy.max_level or level < 0:
        raise PathError(f"level {level} exceeds max level {hierarchy.max_level}")
    curve = covariation_sums(path, level)
    terminal = np.array([covariation_sums(path, m)[-1] for m in range(1, level + 1)])
    cauchy = None
    if level >= 1:
        coarse = covariation_sums(path, level - 1)
        cauchy = float(np.max(np.abs(curve[::2] - coarse)))
    return CovariationCurve(level, hierarchy.times(level), curve,
                            terminal.reshape(-1, path.dim, path.dim), cauchy)


# -- Föllmer integral -----------------------------------------------------


@dataclass(frozen=True)
class FollmerIntegral:
    level: int
    times: np.ndarray
    values: np.ndarray
    cauchy_increment: float | None


def sample_integrand(fn: Callable[[float, np.ndarray], np.ndarray], path: SampledPath,
                     level: int) -> np.ndarray:
    """Evaluate a non-anticipative integrand ``fn(t, S(t))`` at the nodes of ``T_level``.

    Callables with a true ``vectorized`` attribute get all nodes in one call,
    ``fn(ts, xs)`` with ``xs`` of shape ``(2**level + 1, d)``.
    """
    ts = path.times(level)
    xs = path.at_level(level)
    if getattr(fn, "vectorized", False):
        return np.asarray(fn(ts, xs), dtype=float).reshape(xs.shape)
    return np.array([np.asarray(fn(t, x), dtype=float).reshape(path.dim) for t, x in zip(ts, xs)])


def _riemann(integrand: np.ndarray, dS: np.ndarray) -> np.ndarray:
    return _cumulative(np.einsum("kd,kd->k", integrand[: dS.shape[0]], dS))


def follmer_integral(integrand, path: SampledPath, level: int | None = None) -> FollmerIntegral:
    """Left-endpoint Riemann sums ``sum_{s < t} xi(s) . (S(s') - S(s))``.

    ``integrand`` is either an array of shape ``(2**level + 1, d)`` (or
    ``(2**level, d)``; the value at ``T`` is never used) holding ``xi`` at the
    nodes of ``T_level``, or a callable ``fn(t, x)``.
    """
    level = path.level if level is None else level
    if level > path.level or level < 0:
        raise PathError(f"level {level} exceeds path level {path.level}")
    if callable(integrand):
        integrand = sample_integrand(integrand, path, level)
    xi = np.asarray(integrand, dtype=float)
    if xi.ndim == 1 and path.dim == 1:
        xi = xi[:, None]
    n = 2**level
    if xi.ndim != 2 or xi.shape[1] != path.dim or xi.shape[0] not in (n, n + 1):
        raise PathError(f"integrand shape {xi.shape} does not match level {level}, d={path.dim}")
    dS = _increments(path, level)
    values = _riemann(xi, dS)
    cauchy = None
    if level >= 1:
        coarse = _riemann(xi[::2], _increments(path, level - 1))
        cauchy = float(np.max(np.abs(values[::2] - coarse)))
    return FollmerIntegral(level, path.times(level), values, cauchy)


# -- the basic quadratic strategies ---------------------------------------


def basic_strategy(i: int, j: int, K, dim: int) -> Callable[[float, np.ndarray], np.ndarray]:
    """The strategy ``xi^{ij}`` whose Föllmer integral produces ``(S_i + S_j - K)**2``.

    Indices are zero-based.  ``K`` may be a scalar (the entry ``K_ij``) or a
    symmetric matrix.  The returned callable also accepts arrays of spots with
    trailing dimension ``dim``.
    """
    if not (0 <= i < dim and 0 <= j < dim):
        raise IndexError(f"indices ({i}, {j}) out of range for d={dim}")
    K = np.asarray(K, dtype=float)
    if K.ndim == 2:
        if K.shape != (dim, dim) or not np.array_equal(K, K.T):
            raise PathError("K must be a symmetric d x d matrix")
        k_ij = float(K[i, j])
    else:
        k_ij = float(K)

    def xi(t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        if i == j:
            out[..., i] = 2.0 * (x[..., i] - k_ij)
        else:
            val = 2.0 * (x[..., i] + x[..., j] - k_ij)
            out[..., i] = val
            out[..., j] = val
        return out

    xi.vectorized = True
    return xi


def ito_identity_rhs(path: SampledPath, i: int, j: int, K: float, level: int) -> np.ndarray:
    """Closed-form side of the discrete Itô identity for ``xi^{ij}`` at every node.

    ``(S_i + S_j - K)**2 - (S_i(0) + S_j(0) - K)**2 - sum_{k,l in {i,j}} <S_k, S_l>``
    (with ``S_i`` alone when ``i == j``).
    """
    X = path.at_level(level)
    cov = covariation_sums(path, level)
    if i == j:
        y = X[:, i] - K
        return y**2 - y[0] ** 2 - cov[:, i, i]
    y = X[:, i] + X[:, j] - K
    qv = cov[:, i, i] + 2.0 * cov[:, i, j] + cov[:, j, j]
    return y**2 - y[0] ** 2 - qv


# -- pathwise Itô residual ------------------------------------------------


@dataclass
class ClosedFormValue:
    """A value function given by formulas, usable wherever a GridSolution is.

    ``pde_term(t, x)`` must return ``dv/dt + L v`` for the generator in use.
    All callables take ``t`` (scalar or array) and ``x`` of shape ``(..., d)``.
    """

    value_fn: Callable
    gradient_fn: Callable
    pde_term_fn: Callable = field(default=lambda t, x: np.zeros(np.shape(x)[:-1]))
    t_start: float = 0.0
    t_end: float = np.inf

    def value(self, t, x):
        return np.asarray(self.value_fn(t, np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, t, x):
        return np.asarray(self.gradient_fn(t, np.asarray(x, dtype=float)), dtype=float)

    def pde_term(self, t, x):
        return np.asarray(self.pde_term_fn(t, np.asarray(x, dtype=float)), dtype=float)


def pathwise_ito_residual(v, path: SampledPath, level: int | None = None) -> float:
    """Max over nodes of the defect in the pathwise Itô formula for ``v(t, S(t))``.

    ``v`` must provide vectorised ``value``, ``gradient`` and ``pde_term``
    (``dv/dt + L v``) methods and a time interval ``[t_start, t_end]``.  The
    residual is computed over the nodes of ``T_level`` inside that interval;
    the ``ds``-integral uses left endpoints.
    """
    level = path.level if level is None else level
    ts = path.times(level)
    X = path.at_level(level)
    t0, t1 = getattr(v, "t_start", 0.0), getattr(v, "t_end", path.horizon)
    mask = (ts >= t0 - 1e-12) & (ts <= min(t1, path.horizon) + 1e-12)
    ts, X = ts[mask], X[mask]
    if ts.size < 2:
        raise PathError("fewer than two partition nodes inside the value function's interval")
    vals = v.value(ts, X)
    grads = np.asarray(v.gradient(ts, X)).reshape(X.shape)
    drift = v.pde_term(ts, X)
    dS = np.diff(X, axis=0)
    dt = np.diff(ts)
    ito = _cumulative(np.einsum("kd,kd->k", grads[:-1], dS))
    dtint = _cumulative(drift[:-1] * dt)
    return float(np.max(np.abs(vals - vals[0] - ito - dtint)))
