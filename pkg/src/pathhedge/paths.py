"""Euler path generation for local-volatility trajectories.

Randomness comes from numpy's Philox counter-based generator.  Path ``i`` of a
run with seed ``s`` uses the 128-bit key ``s + i * 2**64``, so every path is
reproducible on its own and results never depend on how paths are split
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import LocalVolModel
from .pathcalc import Flavor, PartitionHierarchy, PathError, SampledPath, covariation_sums

_KEY_SHIFT = 1 << 64


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for path ``index`` of run ``seed``."""
    if not 0 <= seed < _KEY_SHIFT or index < 0:
        raise ValueError("seed must fit in 64 bits and index must be nonnegative")
    return np.random.Generator(np.random.Philox(key=seed + index * _KEY_SHIFT))


@dataclass(frozen=True)
class PathGeneratorSpec:
    """Where, how long and how many paths to draw.

    ``kappa`` scales the covariance used for *generation* only; hedging
    code keeps using the unscaled model.
    """

    model: LocalVolModel
    spot: tuple
    horizon: float = 1.0
    level: int = 14
    seed: int = 0
    count: int = 1
    kappa: float = 1.0
    check: bool = True

    def __post_init__(self):
        spot = tuple(float(s) for s in np.atleast_1d(self.spot))
        if len(spot) != self.model.dim:
            raise PathError(f"spot has {len(spot)} coordinates, model has {self.model.dim}")
        if self.model.flavor is Flavor.POSITIVE and min(spot) <= 0:
            raise PathError("positive-flavor spot must be positive")
        if not self.kappa > 0:
            raise PathError("kappa must be positive")
        if self.count < 1 or self.level < 1:
            raise PathError("count and level must be at least 1")
        object.__setattr__(self, "spot", spot)

    @property
    def hierarchy(self) -> PartitionHierarchy:
        return PartitionHierarchy(self.horizon, self.level)

    def generation_model(self) -> LocalVolModel:
        return self.model if self.kappa == 1.0 else self.model.scaled(self.kappa)


def _normals(seed: int, indices, n_steps: int, d: int) -> np.ndarray:
    return np.stack([path_rng(seed, int(i)).standard_normal((n_steps, d)) for i in indices])


def _cholesky(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise PathError("covariance is not positive definite along the path") from exc


def euler_paths(model: LocalVolModel, spot, t0: float, t1: float, Z: np.ndarray) -> np.ndarray:
    """Euler scheme driven by standard normals ``Z`` of shape ``(paths, steps, d)``.

    Returns ``(paths, steps + 1, d)``.  Positive models step ``log S`` with
    drift ``-a_ii / 2`` and exponentiate.
    """
    n_paths, n_steps, d = Z.shape
    dt = (t1 - t0) / n_steps
    sq = math.sqrt(dt)
    spot = np.asarray(spot, dtype=float)
    positive = model.flavor is Flavor.POSITIVE
    start = np.log(spot) if positive else spot
    out = np.empty((n_paths, n_steps + 1, d))
    out[:, 0] = start
    if model.constant_matrix is not None:
        A = model.constant_matrix
        incr = sq * Z @ _cholesky(A).T
        if positive:
            incr = incr - 0.5 * np.diag(A) * dt
        np.cumsum(incr, axis=1, out=out[:, 1:])
        out[:, 1:] += start
    else:
        y = np.broadcast_to(start, (n_paths, d)).copy()
        for m in range(n_steps):
            t = t0 + m * dt
            A = model.a(t, np.exp(y) if positive else y)
            y = y + sq * np.einsum("pij,pj->pi", _cholesky(A), Z[:, m])
            if positive:
                y -= 0.5 * np.diagonal(A, axis1=-2, axis2=-1) * dt
            out[:, m + 1] = y
    if positive:
        out = np.exp(out)
        if not np.all(out > 0):
            raise PathError("positive path lost positivity")
    return out


@dataclass(frozen=True)
class CovariationCheck:
    realized: np.ndarray
    target: np.ndarray
    tolerance: np.ndarray
    passed: bool


def covariation_check(path: SampledPath, model: LocalVolModel, kappa: float = 1.0,
                      sigmas: float = 6.0) -> CovariationCheck:
    """Compare level-L covariation with the left-point integral of ``kappa * a``.

    Per-step increments have covariance ``A = kappa a dt`` (times ``S_i S_j``
    for positive paths); the realized sum has entry-wise variance
    ``sum (A_ii A_jj + A_ij**2)``.  The tolerance is ``sigmas`` standard
    deviations of that sum.
    """
    ts = path.times()
    X = path.values
    dt = np.diff(ts)[:, None, None]
    dens = kappa * model.covariation_density(ts[:-1], X[:-1])
    A = dens * dt
    target = A.sum(axis=0)
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    var = (diag[:, :, None] * diag[:, None, :] + A**2).sum(axis=0)
    tol = sigmas * np.sqrt(var)
    realized = covariation_sums(path, path.level)[-1]
    return CovariationCheck(realized, target, tol, bool(np.all(np.abs(realized - target) <= tol)))


def generate_paths(spec: PathGeneratorSpec, indices=None) -> list[SampledPath]:
    """Paths ``indices`` (default ``range(spec.count)``) of the run ``spec``."""
    indices = range(spec.count) if indices is None else indices
    hier = spec.hierarchy
    n = 2**spec.level
    model = spec.generation_model()
    Z = _normals(spec.seed, indices, n, model.dim)
    raw = euler_paths(model, spec.spot, 0.0, spec.horizon, Z)
    paths = []
    for values in raw:
        p = SampledPath(hier, values, spec.model.flavor)
        if spec.check:
            chk = covariation_check(p, spec.model, spec.kappa)
            if not chk.passed:
                raise PathError(f"realized covariation {chk.realized.tolist()} outside tolerance "
                                f"of target {chk.target.tolist()}")
        paths.append(p)
    return paths


def generate_path(spec: PathGeneratorSpec, index: int = 0) -> SampledPath:
    return generate_paths(spec, [index])[0]


def simulate_terminal(model: LocalVolModel, spot, t0: float, t1: float, n_paths: int,
                      steps: int = 64, seed: int = 0) -> np.ndarray:
    """Endpoints ``S(t1)`` of ``n_paths`` Euler paths started at ``(t0, spot)``."""
    Z = _normals(seed, range(n_paths), steps, model.dim)
    return euler_paths(model, spot, t0, t1, Z)[:, -1]
