"""Invariants checked on generated inputs."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from pathhedge.lattice import GridSpec, LocalVolModel, maximum_principle_check, solve_tvp
from pathhedge.pathcalc import (
    Flavor,
    PartitionHierarchy,
    SampledPath,
    basic_strategy,
    covariation,
    covariation_sums,
    follmer_integral,
    ito_identity_rhs,
)
from pathhedge.payoff import PayoffSpec

seeds = st.integers(0, 2**32 - 1)
FAST = settings(max_examples=40, deadline=None)
SLOW = settings(max_examples=12, deadline=None)


def random_path(seed, dim=2, level=8, scale=1.0):
    rng = np.random.default_rng(seed)
    h = PartitionHierarchy(1.0, level)
    steps = rng.standard_normal((2**level, dim)) * scale / np.sqrt(2**level)
    start = rng.uniform(-2, 2, (1, dim))
    return SampledPath(h, np.cumsum(np.vstack([start, steps]), axis=0))


@FAST
@given(seeds, st.integers(1, 8))
def test_polarization(seed, level):
    p = random_path(seed)
    cov = covariation_sums(p, level)
    s = SampledPath(p.hierarchy, np.column_stack([p.values.sum(1), p.values[:, 0] - p.values[:, 1]]))
    sc = covariation_sums(s, level)
    np.testing.assert_allclose(cov[:, 0, 1], (sc[:, 0, 0] - sc[:, 1, 1]) / 4, atol=1e-12)


@FAST
@given(seeds, st.integers(1, 8))
def test_covariation_is_monotone_and_symmetric(seed, level):
    curve = covariation(random_path(seed, dim=3), level=level)
    assert np.all(np.diff(curve.values[:, [0, 1, 2], [0, 1, 2]], axis=0) >= 0)
    np.testing.assert_array_equal(curve.values, np.swapaxes(curve.values, 1, 2))
    # every increment is a Gram matrix, so the curve stays positive semidefinite
    assert np.min(np.linalg.eigvalsh(curve.terminal)) >= -1e-12


@FAST
@given(seeds, st.integers(0, 1), st.integers(0, 1), st.floats(-3, 3), st.integers(2, 8))
def test_discrete_ito_identity(seed, i, j, K, level):
    p = random_path(seed)
    lhs = follmer_integral(basic_strategy(i, j, K, 2), p, level).values
    rhs = ito_identity_rhs(p, i, j, K, level)
    scale = max(1.0, float(np.max(np.abs(rhs))))
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * scale)


@FAST
@given(seeds, st.floats(-5, 5), st.floats(-5, 5))
def test_follmer_integral_is_linear(seed, a, b):
    p = random_path(seed)
    rng = np.random.default_rng(seed + 1)
    x1, x2 = rng.standard_normal((2, 2**8 + 1, 2))
    lhs = follmer_integral(a * x1 + b * x2, p).values
    rhs = a * follmer_integral(x1, p).values + b * follmer_integral(x2, p).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * (1 + abs(a) + abs(b)))


@SLOW
@given(seeds)
def test_maximum_principle_on_random_data(seed):
    grid = GridSpec(((-6.0, 6.0),), 121)
    rng = np.random.default_rng(seed)
    f = np.abs(rng.standard_normal(121)) * (rng.uniform(size=121) < 0.3)
    heat = LocalVolModel.constant([[rng.uniform(0.2, 2.0)]])
    rep = maximum_principle_check(heat, None, 0.0, 0.5, grid, terminal_values=f)
    assert rep.passed


@SLOW
@given(st.floats(0.05, 0.5), st.floats(60.0, 140.0))
def test_positive_solver_matches_manual_log_transform(sigma, strike):
    """Log-space solve of a Black-Scholes call equals the same problem posed in y = log x."""
    pos = LocalVolModel.constant([[sigma**2]], Flavor.POSITIVE)
    grid = GridSpec(((np.log(20.0), np.log(500.0)),), 201, n_time=400)
    call = lambda x: np.maximum(x[..., 0] - strike, 0.0)  # noqa: E731
    a = solve_tvp(pos, call, 0.0, 1.0, grid)
    y = np.linspace(np.log(20.0), np.log(500.0), 201)
    b = solve_tvp(pos, None, 0.0, 1.0, grid, terminal_values=np.maximum(np.exp(y) - strike, 0.0))
    np.testing.assert_allclose(a.values[0], b.values[0], atol=1e-12)
    # the value map in original coordinates reads the same nodes
    np.testing.assert_allclose(a.value(0.0, np.exp(y[50:150])[:, None]), b.values[0][50:150],
                               atol=1e-9 * strike)


@FAST
@given(st.floats(-10, 10), st.lists(st.floats(-200, 200), min_size=3, max_size=3))
def test_payoff_scaling(c, fixings):
    p = PayoffSpec.parse("(+ (call (avg x1 x2) 100) (put x0 90))", 2)
    assert p.scaled(c).evaluate(fixings) == np.float64(c) * p.evaluate(fixings)
