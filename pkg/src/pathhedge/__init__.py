"""Pathwise Delta hedging on sampled trajectories."""

from .pathcalc import (
    ClosedFormValue,
    Flavor,
    PartitionHierarchy,
    SampledPath,
    basic_strategy,
    covariation,
    follmer_integral,
    pathwise_ito_residual,
)
from .lattice import GridSolution, GridSpec, LocalVolModel, log_transform, solve_tvp

__version__ = "0.1.0"

__all__ = [
    "ClosedFormValue",
    "Flavor",
    "GridSolution",
    "GridSpec",
    "LocalVolModel",
    "PartitionHierarchy",
    "SampledPath",
    "basic_strategy",
    "covariation",
    "follmer_integral",
    "log_transform",
    "pathwise_ito_residual",
    "solve_tvp",
]
