import numpy as np
import pytest

from oracles import continuous_asian_oracle, lookback_quadrature
from pathhedge.functional import (
    StateKind,
    asian_call_functional,
    constant_functional,
    ftvp_residual,
    functional_hedge_check,
    grid_functional,
    horizontal_derivative,
    integral_functional,
    spot_functional,
    lookback_functional,
    lookback_neumann_defect,
    vertical_derivative,
    vertical_derivatives,
)
from pathhedge.lattice import GridDomainError, GridSpec, LocalVolModel, solve_tvp
from pathhedge.pathcalc import Flavor, PathError
from pathhedge.paths import PathGeneratorSpec, generate_path, generate_paths


@pytest.fixture(scope="module")
def asian():
    return asian_call_functional(0.2, 100.0, 1.0, scale=100.0)


@pytest.fixture(scope="module")
def gbm_paths(bs_model):
    return generate_paths(PathGeneratorSpec(bs_model, (100.0,), 1.0, 12, seed=11, count=4))


def test_spot_functional_derivatives():
    model = LocalVolModel.constant([[1.0]])
    path = generate_path(PathGeneratorSpec(model, (0.0,), 1.0, 14, seed=6))
    F = spot_functional(1.0)
    g, H = vertical_derivative(F, path, 0.5)
    assert g[0] == pytest.approx(1.0, abs=1e-11) and abs(H[0, 0]) < 1e-6
    assert horizontal_derivative(F, path, 0.5) == 0.0
    # F is linear, so a wide bump leaves only roundoff in the telescoping sum
    assert functional_hedge_check(F, path, 14, h=0.5).discrepancy <= 1e-12


def test_integral_functional_derivatives(gbm_path):
    F = integral_functional(1.0)
    assert vertical_derivative(F, gbm_path, 0.25, h=0.01)[0][0] == 0.0
    x = gbm_path(0.25)[0]
    assert horizontal_derivative(F, gbm_path, 0.25) == pytest.approx(x, rel=1e-12)
    # the state is the trapezoid integral of the path
    k = gbm_path.hierarchy.index(0.25)
    ts, X = gbm_path.times()[: k + 1], gbm_path.values[: k + 1, 0]
    assert F.evaluate(gbm_path, 0.25) == pytest.approx(np.trapezoid(X, ts), rel=1e-12)


def test_constant_functional_is_free(gbm_path):
    F = constant_functional(3.5, 1.0)
    assert functional_hedge_check(F, gbm_path, 10).discrepancy == 0.0


def test_derivative_guards(gbm_path):
    F = integral_functional(1.0)
    with pytest.raises(PathError):
        vertical_derivative(F, gbm_path, 1.0)
    with pytest.raises(PathError):
        horizontal_derivative(F, gbm_path, 0.5, dt=0.01)
    pos = asian_call_functional(0.2, 100.0, 1.0, n_z=101, n_t=50, richardson=False)
    with pytest.raises(GridDomainError):
        vertical_derivatives(pos, 0.5, 1e-3, 0.0, h=0.01)


def test_degenerate_augmentation_matches_lattice(bs_model, gbm_path):
    grid = GridSpec.around(100.0, bs_model, 1.0)
    sol = solve_tvp(bs_model, lambda x: np.maximum(x[..., 0] - 100.0, 0.0), 0.0, 1.0, grid)
    F = grid_functional(sol, scale=100.0)
    t = 0.5
    x = gbm_path(t)[None]
    g, _ = vertical_derivative(F, gbm_path, t)
    assert g[0] == pytest.approx(sol.gradient(t, x)[0, 0], abs=1e-4)
    samples = [(gbm_path, gbm_path.times()[k]) for k in range(512, 14000, 1500)]
    rep = ftvp_residual(F, bs_model, samples)
    assert rep.passed, (rep.sup_residual, rep.tolerance)


def test_asian_value_matches_monte_carlo(asian):
    ref = continuous_asian_oracle()
    v = float(asian.value_map(np.array([0.0]), np.array([[100.0]]), np.array([0.0]))[0])
    assert abs(v - ref["price"]) <= 3 * ref["std_error"] + 1e-4


def test_asian_in_the_money_is_linear(asian):
    # once I/T >= K the payoff is linear: u = I/T - K + x (T - t)/T
    t, x, s = 0.6, 90.0, 105.0
    v = asian.value_map(np.array([t]), np.array([[x]]), np.array([s]))[0]
    assert v == pytest.approx(5.0 + 90.0 * 0.4, abs=1e-12)


def test_asian_terminal_and_residual(asian, gbm_paths, bs_model):
    samples = [(p, p.times()[k]) for p in gbm_paths for k in range(100, 3700, 400)]
    rep = ftvp_residual(asian, bs_model, samples)
    assert rep.terminal_error == 0.0
    assert rep.passed, (rep.sup_residual, rep.tolerance)
    assert asian.kind is StateKind.INTEGRAL and asian.flavor is Flavor.POSITIVE


@pytest.mark.parametrize("t,x,m", [(0.0, 100.0, 100.0), (0.3, 90.0, 110.0),
                                   (0.9, 120.0, 121.0), (0.5, 50.0, 100.0)])
def test_lookback_closed_form(t, x, m):
    F = lookback_functional(0.2, 1.0)
    v = F.value_map(np.array([t]), np.array([[x]]), np.array([m]))[0]
    assert v == pytest.approx(lookback_quadrature(x, m, 0.2, 1.0 - t), rel=1e-10)


def test_lookback_neumann_and_diagonal(bs_model):
    assert abs(lookback_neumann_defect(0.2, 1.0, 0.5, 100.0, dm=1e-6)) < 1e-4
    F = lookback_functional(0.2, 1.0)
    path = generate_path(PathGeneratorSpec(bs_model, (100.0,), 1.0, 12, seed=2))
    samples = [(path, path.times()[k]) for k in range(50, 3900, 100)]
    # close to maturity the one-sided time difference dominates, so refine dt below the mesh
    rep = ftvp_residual(F, bs_model, samples, dt=1e-6, diagonal_band=0.5)
    # points on or near the running maximum are reported but not judged
    assert len(rep.rows) + len(rep.diagonal_rows) == len(samples)
    assert rep.passed, (rep.sup_residual, rep.tolerance)


def test_residual_report_csv(tmp_path, asian, gbm_paths, bs_model):
    rep = ftvp_residual(asian, bs_model, [(gbm_paths[0], 0.5)])
    f = tmp_path / "r.csv"
    rep.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "t,x,state,DF,A_F,residual" and len(lines) == 2


def test_self_financing_shrinks(asian, bs_model):
    path = generate_path(PathGeneratorSpec(bs_model, (100.0,), 1.0, 14, seed=11))
    d = [functional_hedge_check(asian, path, n).discrepancy for n in (8, 11, 14)]
    assert d[0] > d[1] > d[2]


def test_symmetric_second_vertical_derivative():
    from pathhedge.functional import AugmentedFunctional

    F = AugmentedFunctional(StateKind.TERMINAL, lambda t, x, s: x[:, 0] ** 2 * x[:, 1],
                            lambda x, s: x[:, 0] ** 2 * x[:, 1], 1.0, dim=2)
    _, H = vertical_derivatives(F, 0.5, np.array([1.5, -2.0]), 0.0, h=1e-3)
    assert H[0, 0, 1] == H[0, 1, 0] == pytest.approx(3.0, abs=1e-6)
    assert H[0, 0, 0] == pytest.approx(-4.0, abs=1e-5)


def test_whole_space_flavor_default():
    assert LocalVolModel.constant([[1.0]]).flavor is Flavor.WHOLE
