"""Experiment configuration: TOML files turned into validated library objects.

Layout (all tables optional unless the command needs them)::

    [model]     family, flavor, bound, lambda_min, plus family parameters
    [grid]      n_space, n_time, fixing_points, width_sd, bounds
    [schedule]  times, level
    [payoff]    expr, lipschitz_p, lipschitz_L
    [paths]     spot, level, seed, count, kappa
    [problem]   terminal, t_start, t_end        (solve)
    [check]     per-command expectations and tolerances
    [robust] [noarb] [functional] [integrate]   command-specific settings

See README.md for every key.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .lattice import GridSpec, LocalVolModel, ModelValidationError
from .pathcalc import Flavor
from .payoff import PayoffParseError, PayoffSpec, PayoffValidationError


class ConfigParseError(ValueError):
    """The file is not valid TOML or an expression does not parse."""


class ConfigValidationError(ValueError):
    """The file parses but its content is inconsistent."""


@dataclass
class ExperimentConfig:
    raw: dict
    source: str = "<memory>"
    overrides: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text(), str(path))

    @classmethod
    def loads(cls, text: str, source: str = "<memory>") -> "ExperimentConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigParseError(f"{source}: {exc}") from exc
        return cls(raw, source)

    # helpers ------------------------------------------------------------------
    def section(self, name: str, required: bool = False) -> dict:
        sec = self.raw.get(name)
        if sec is None:
            if required:
                raise ConfigValidationError(f"missing [{name}] table")
            return {}
        if not isinstance(sec, dict):
            raise ConfigValidationError(f"[{name}] must be a table")
        return sec

    @property
    def command(self) -> str | None:
        return self.raw.get("command")

    def echo(self) -> dict:
        return {"source": self.source, "config": self.raw, "overrides": self.overrides}

    # builders -----------------------------------------------------------------
    def model(self) -> LocalVolModel:
        sec = self.section("model", required=True)
        family = sec.get("family", "constant")
        flavor = sec.get("flavor", "whole")
        try:
            flavor = Flavor(flavor)
        except ValueError:
            raise ConfigValidationError(f"unknown flavor {flavor!r}") from None
        bound = sec.get("bound")
        lam = sec.get("lambda_min")
        try:
            if family == "constant":
                if "matrix" not in sec:
                    raise ConfigValidationError("constant model needs 'matrix'")
                return LocalVolModel.constant(sec["matrix"], flavor, bound, lam)
            if family == "separable":
                sig = [_sigma_fn(s) for s in sec.get("sigmas", [])]
                if not sig:
                    raise ConfigValidationError("separable model needs 'sigmas'")
                return LocalVolModel.separable(sig, sec.get("correlation"), flavor,
                                               _need(bound, "bound"), _need(lam, "lambda_min"),
                                               time_homogeneous=True)
            if family == "tabulated":
                return LocalVolModel.tabulated(sec["t_grid"], sec["x_grids"], sec["table"], flavor,
                                               bound, _need(lam, "lambda_min"))
        except ModelValidationError as exc:
            raise ConfigValidationError(str(exc)) from exc
        except KeyError as exc:
            raise ConfigValidationError(f"model is missing key {exc}") from exc
        raise ConfigValidationError(f"unknown model family {family!r}")

    def grid(self, model: LocalVolModel, spot, horizon: float) -> GridSpec:
        sec = self.section("grid")
        n_space = int(sec.get("n_space", 801))
        n_time = sec.get("n_time")
        n_time = None if n_time is None else int(n_time)
        fixing_points = int(sec.get("fixing_points", 33))
        if "bounds" in sec:
            g = GridSpec(tuple(tuple(b) for b in sec["bounds"]), n_space, n_time,
                         fixing_points=fixing_points)
        else:
            g = GridSpec.around(spot, model, horizon, n_space, n_time,
                                float(sec.get("width_sd", 6.0)), fixing_points)
        y = np.log(spot) if model.flavor is Flavor.POSITIVE else np.asarray(spot, float)
        if not g.contains(y):
            raise ConfigValidationError(f"grid does not cover the spot {list(spot)}")
        return g

    def schedule(self):
        from .scheme import FixingSchedule, SchemeError

        sec = self.section("schedule", required=True)
        level = int(self.overrides.get("level", sec.get("level", 14)))
        try:
            if "times" in sec:
                return FixingSchedule(tuple(sec["times"]), level)
            return FixingSchedule.uniform(int(sec["n"]), float(sec.get("horizon", 1.0)), level)
        except SchemeError as exc:
            raise ConfigValidationError(str(exc)) from exc
        except KeyError:
            raise ConfigValidationError("[schedule] needs 'times' or 'n'") from None

    def payoff(self, n_fixings: int, dim: int, sec: dict | None = None) -> PayoffSpec:
        sec = self.section("payoff", required=True) if sec is None else sec
        if "expr" not in sec:
            raise ConfigValidationError("payoff needs 'expr'")
        return parse_payoff(sec["expr"], n_fixings, dim, sec.get("lipschitz_p", 0.0),
                            sec.get("lipschitz_L"))

    def spot(self, dim: int) -> tuple:
        sec = self.section("paths")
        spot = sec.get("spot", self.section("problem").get("spot"))
        if spot is None:
            raise ConfigValidationError("no spot given in [paths] or [problem]")
        spot = tuple(float(s) for s in np.atleast_1d(spot))
        if len(spot) != dim:
            raise ConfigValidationError(f"spot has {len(spot)} coordinates, model has {dim}")
        return spot

    def seed(self) -> int:
        if "seed" in self.overrides:
            return int(self.overrides["seed"])
        return int(self.section("paths").get("seed", 0))

    def check(self, key: str, default=None):
        return self.section("check").get(key, default)


def parse_payoff(expr: str, n_fixings: int, dim: int, p: float = 0.0,
                 L: float | None = None) -> PayoffSpec:
    try:
        return PayoffSpec.parse(expr, n_fixings, dim, float(p), None if L is None else float(L))
    except PayoffParseError as exc:
        raise ConfigParseError(f"payoff {expr!r}: {exc}") from exc
    except PayoffValidationError as exc:
        raise ConfigValidationError(f"payoff {expr!r}: {exc}") from exc


def _need(value, name):
    if value is None:
        raise ConfigValidationError(f"model needs '{name}'")
    return float(value)


def _sigma_fn(spec: dict):
    """Volatility factor ``sigma_i(t, x_i)``.

    ``{type = "constant", value = s}`` or
    ``{type = "cev", level = s, ref = x_ref, beta = b, floor = lo, cap = hi}``
    giving ``clip(s * (x / x_ref) ** (b - 1), lo, hi)``.
    """
    kind = spec.get("type", "constant")
    if kind == "constant":
        v = float(spec["value"])
        return lambda t, x: np.full(np.shape(x), v)
    if kind == "cev":
        level, ref, beta = float(spec["level"]), float(spec["ref"]), float(spec["beta"])
        lo, hi = float(spec["floor"]), float(spec["cap"])

        def cev(t, x):
            x = np.maximum(np.abs(np.asarray(x, float)), 1e-300)
            return np.clip(level * (x / ref) ** (beta - 1.0), lo, hi)

        return cev
    raise ConfigValidationError(f"unknown sigma type {kind!r}")
