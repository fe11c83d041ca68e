import math

import numpy as np
import pytest

from pathhedge.config import ConfigParseError, ConfigValidationError, ExperimentConfig
from pathhedge.lattice import ModelValidationError
from pathhedge.pathcalc import Flavor

BASE = """
[model]
family = "separable"
flavor = "positive"
bound = 1.0
lambda_min = 0.0025
sigmas = [{ type = "cev", level = 0.25, ref = 100.0, beta = 0.5, floor = 0.05, cap = 1.0 }]

[schedule]
n = 4
level = 10

[payoff]
expr = "(call (avg x1 x2 x3 x4) 100)"

[paths]
spot = 100.0
seed = 17
"""


def test_builds_every_object():
    cfg = ExperimentConfig.loads(BASE)
    m = cfg.model()
    assert m.flavor is Flavor.POSITIVE and m.dim == 1
    assert m.a(0.0, np.array([[100.0]]))[0, 0, 0] == pytest.approx(0.0625)
    assert m.a(0.0, np.array([[1e6]]))[0, 0, 0] == pytest.approx(0.0025)
    sched = cfg.schedule()
    assert sched.times == (0.0, 0.25, 0.5, 0.75, 1.0) and sched.level == 10
    pay = cfg.payoff(sched.n, 1)
    assert pay.depends_on == frozenset({1, 2, 3, 4})
    grid = cfg.grid(m, cfg.spot(1), 1.0)
    assert grid.contains([math.log(100.0)])
    assert cfg.seed() == 17


def test_overrides():
    cfg = ExperimentConfig.loads(BASE)
    cfg.overrides.update(seed=2**64 - 1, level=12)
    assert cfg.seed() == 2**64 - 1
    assert cfg.schedule().level == 12
    assert cfg.echo()["overrides"] == {"seed": 2**64 - 1, "level": 12}


@pytest.mark.parametrize("text", ["[model", "a = ", "x = [1, 2"])
def test_parse_errors(text):
    with pytest.raises(ConfigParseError):
        ExperimentConfig.loads(text)


@pytest.mark.parametrize("patch,stage", [
    (('family = "separable"', 'family = "weird"'), "model"),
    (('flavor = "positive"', 'flavor = "sideways"'), "model"),
    (('type = "cev"', 'type = "spline"'), "model"),
    (("n = 4", "n = 3"), "schedule"),  # 1/3 is not dyadic
    (("spot = 100.0", "spot = [100.0, 1.0]"), "spot"),
])
def test_validation_errors(patch, stage):
    cfg = ExperimentConfig.loads(BASE.replace(*patch))
    build = {"model": cfg.model, "schedule": cfg.schedule, "spot": lambda: cfg.spot(1)}[stage]
    with pytest.raises(ConfigValidationError):
        build()


def test_eigenvalue_floor_is_probed():
    cfg = ExperimentConfig.loads(BASE.replace("lambda_min = 0.0025", "lambda_min = 0.1"))
    model = cfg.model()
    lo, hi = np.exp(cfg.grid(model, cfg.spot(1), 1.0).bounds[0])
    with pytest.raises(ModelValidationError):
        model.validate([lo], [hi], 1.0)


def test_payoff_errors_are_classified():
    cfg = ExperimentConfig.loads(BASE.replace("(call (avg x1 x2 x3 x4) 100)", "(call x5 1)"))
    with pytest.raises(ConfigValidationError):
        cfg.payoff(4, 1)
    cfg = ExperimentConfig.loads(BASE.replace("(call (avg x1 x2 x3 x4) 100)", "(call x1"))
    with pytest.raises(ConfigParseError):
        cfg.payoff(4, 1)


def test_missing_tables():
    cfg = ExperimentConfig.loads("command = 'qv'")
    assert cfg.command == "qv"
    with pytest.raises(ConfigValidationError):
        cfg.model()
    with pytest.raises(ConfigValidationError):
        cfg.spot(1)
    with pytest.raises(ConfigValidationError):
        ExperimentConfig.loads("model = 3").model()


def test_grid_must_cover_spot():
    text = BASE + "\n[grid]\nbounds = [[0.0, 1.0]]\nn_space = 101\nfixing_points = 11\n"
    cfg = ExperimentConfig.loads(text)
    with pytest.raises(ConfigValidationError):
        cfg.grid(cfg.model(), cfg.spot(1), 1.0)
