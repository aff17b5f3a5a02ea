import numpy as np
import pytest

from isaacslab.model import load_spec
from isaacslab.solver import (
    Grid,
    SolverError,
    StabilityError,
    ValueField,
    gradient,
    residual,
    solve_bi,
    solve_hjb_control,
    stability_limit,
)

from conftest import SINE_HEAT, make_spec

SIG = 0.5
BOX = (-np.pi, 2 * np.pi)


def heat_solution(t, x, sigma=SIG, T=1.0):
    return np.exp(-0.5 * sigma**2 * (T - t)) * np.sin(x)


def small_grid(spec, n=121, nt=201):
    return Grid.for_spec(spec, BOX[0], BOX[1], n, nt)


def interior_error(field, exact):
    grid = field.grid
    mask = grid.inner_mask(0.6)
    x = grid.axes[0]
    return max(np.max(np.abs(field.v[k][mask] - exact(t, x[mask]))) for k, t in enumerate(grid.times))


def test_sine_heat_matches_closed_form(sine_heat):
    _, field = sine_heat
    assert interior_error(field, heat_solution) <= 1e-3
    assert field.value_at(0.0, [[np.pi / 2]])[0] == pytest.approx(np.exp(-0.125), abs=1e-3)
    assert field.equation == "BI-upper" and not field.scheme["lax_friedrichs"]


def test_terminal_condition_is_exact(sine_heat):
    sc, field = sine_heat
    X = field.grid.nodes()
    assert np.max(np.abs(field.v[-1] - sc.spec.terminal_cost(X))) == 0.0


def test_constants_are_invariant():
    spec = make_spec(f1="0", l="0", g="1")
    field = solve_bi(spec, small_grid(spec))
    assert np.all(field.v == 1.0)
    assert residual(spec, field).max == 0.0


def test_upper_and_lower_coincide_for_separable_hamiltonian():
    spec = load_spec(SINE_HEAT)
    grid = small_grid(spec)
    up = solve_bi(spec, grid, "upper")
    lo = solve_bi(spec, grid, "lower")
    assert np.max(np.abs(up.v - lo.v)) <= 1e-12


def test_bilinear_sides_split_linearly():
    spec = make_spec(f1="u1_1*u2_1", l="0", g="x1", points=2)
    grid = Grid.for_spec(spec, -4.0, 4.0, 81, 101)
    up = solve_bi(spec, grid, "upper")
    lo = solve_bi(spec, grid, "lower")
    t = grid.times[:, None]
    x = grid.axes[0][None, :]
    np.testing.assert_allclose(up.v, x + (1.0 - t), atol=1e-12)
    np.testing.assert_allclose(lo.v, x - (1.0 - t), atol=1e-12)


def test_comparison_principle():
    low = make_spec(g="sin(x1)")
    high = make_spec(g="sin(x1) + 0.3 + 0.2*cos(x1)^2")
    grid = small_grid(low)
    v1 = solve_bi(low, grid).v
    v2 = solve_bi(high, grid).v
    assert np.all(v2 >= v1 - 1e-12)


CONTROL = """
[model]
kind = "control"
d = 1
m = 1
T = 1.0
[dynamics]
b = "0"
f1 = "{f1}"
sigma = "0.5"
[cost]
l = "{l}"
g = "{g}"
[controls.u]
lo = -2
hi = 2
points = {points}
"""


def control_spec(f1="0", l="u_1^2", g="sin(x1)", points=41):
    return load_spec(CONTROL.format(f1=f1, l=l, g=g, points=points))


def test_hjb_with_zero_hamiltonian_is_heat_flow():
    spec = control_spec()
    field = solve_hjb_control(spec, small_grid(spec, 201, 401))
    assert field.equation == "HJB-control"
    assert interior_error(field, heat_solution) <= 2e-3


def test_hjb_constant_terminal():
    spec = control_spec(l="0", g="2.5")
    assert np.all(solve_hjb_control(spec, small_grid(spec)).v == 2.5)


def test_hjb_rejects_games():
    with pytest.raises(ValueError):
        solve_hjb_control(load_spec(SINE_HEAT), small_grid(load_spec(SINE_HEAT)))


def test_two_dimensional_heat_with_mixed_term():
    text = """
[model]
d = 2
m = 2
T = 1.0
[dynamics]
b = ["0", "0"]
f1 = ["u1_1 - u2_1", "0"]
sigma = [["0.5", "0"], ["0.3", "0.4"]]
[cost]
l = "u2_1^2/2 - u1_1^2/2"
g = "sin(x1 + x2)"
[controls.u1]
lo = -1
hi = 1
points = 5
[controls.u2]
lo = -1
hi = 1
points = 5
"""
    spec = load_spec(text)
    grid = Grid.for_spec(spec, [-np.pi, -np.pi], [2 * np.pi, 2 * np.pi], 61, 81)
    field = solve_bi(spec, grid)
    # a = sigma sigma^T = [[0.25, 0.15], [0.15, 0.25]]; the generator acting on
    # sin(x1 + x2) gives -(a11 + 2 a12 + a22)/2 = -0.4 while H0 vanishes for |p| <= 1
    x1, x2 = np.meshgrid(*grid.axes, indexing="ij")
    exact = np.exp(-0.4) * np.sin(x1 + x2)
    mask = grid.inner_mask(0.6)
    assert np.max(np.abs(field.v[0][mask] - exact[mask])) <= 5e-3
    assert field.grad.shape == (grid.nt, 61, 61, 2)


def test_stability_error_and_hint():
    spec = load_spec(SINE_HEAT)
    grid = small_grid(spec, 401, 21)
    lim = stability_limit(spec, grid)
    assert lim["dt_max"] < grid.dt
    with pytest.raises(StabilityError, match="nt >="):
        solve_bi(spec, grid)


def test_non_finite_terminal_is_reported():
    spec = make_spec(g="exp(1000*x1)")
    with pytest.raises(SolverError):
        solve_bi(spec, small_grid(spec))


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid((0.0,), (1.0,), (2,), 10, 1.0)
    with pytest.raises(ValueError):
        Grid((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (5, 5, 5), 10, 1.0)
    spec = load_spec(SINE_HEAT)
    with pytest.raises(ValueError):
        solve_bi(spec, Grid((0.0,), (1.0,), (11,), 10, 2.0))
    with pytest.raises(ValueError):
        solve_bi(spec, small_grid(spec), side="middle")


def test_lax_friedrichs_switch():
    spec = make_spec(sigma="0.05")
    field = solve_bi(spec, small_grid(spec, 121, 201))
    assert field.scheme["lax_friedrichs"] and field.scheme["c_hat"] < 0.05
    # u1* = u2* cancels the drift, so the viscosity vanishes and the heat solution survives
    assert interior_error(field, lambda t, x: heat_solution(t, x, sigma=0.05)) <= 1e-3


# ----------------------------------------------------------------- gradient


def _field_from(values, grid):
    return gradient(ValueField(grid=grid, v=values, equation="test", side="upper"))


def test_gradient_of_quadratic_is_exact():
    grid = Grid((-1.0,), (2.0,), (31,), 3, 1.0)
    x = grid.axes[0]
    f = _field_from(np.tile(x**2, (3, 1)), grid)
    np.testing.assert_allclose(f.grad[0, :, 0], 2 * x, atol=1e-12)


def test_gradient_of_constant_is_zero():
    grid = Grid((0.0,), (1.0,), (11,), 4, 1.0)
    f = _field_from(np.full((4, 11), 3.0), grid)
    assert np.all(f.grad == 0.0)


def test_gradient_of_sine_within_taylor_bound():
    h = np.pi / 100
    grid = Grid((0.0,), (2 * np.pi,), (201,), 3, 1.0)
    assert grid.h[0] == pytest.approx(h)
    x = grid.axes[0]
    f = _field_from(np.tile(np.sin(x), (3, 1)), grid)
    err = np.abs(f.grad[0, 1:-1, 0] - np.cos(x[1:-1]))
    assert err.max() <= h**2 / 6


def test_gradient_edges_are_second_order():
    errs = []
    for n in (51, 101, 201):
        grid = Grid((0.0,), (2.0,), (n,), 3, 1.0)
        x = grid.axes[0]
        f = _field_from(np.tile(np.sin(x), (3, 1)), grid)
        errs.append(np.abs(f.grad[0, [0, -1], 0] - np.cos(x[[0, -1]])).max())
    for coarse, fine in zip(errs, errs[1:]):
        assert 3.5 <= coarse / fine <= 4.5


def test_gradient_last_level_copies_previous():
    grid = Grid((0.0,), (1.0,), (11,), 5, 1.0)
    v = np.random.default_rng(0).normal(size=(5, 11))
    f = _field_from(v, grid)
    np.testing.assert_array_equal(f.grad[-1], f.grad[-2])


def test_grad_at_is_piecewise_constant_in_time(sine_heat):
    _, field = sine_heat
    dt = field.grid.dt
    X = np.array([[0.3], [1.1]])
    a, _ = field.grad_at(5 * dt, X)
    b, _ = field.grad_at(5.5 * dt, X)
    c, _ = field.grad_at(6 * dt, X)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    _, outside = field.grad_at(0.0, np.array([[100.0], [0.0]]))
    assert outside.tolist() == [True, False]


# ----------------------------------------------------------------- residual


def test_residual_refinement_order():
    spec = load_spec(SINE_HEAT)
    res = []
    for n, nt in ((61, 51), (121, 201), (241, 801)):
        res.append(residual(spec, solve_bi(spec, small_grid(spec, n, nt))).max)
    ratios = [res[0] / res[1], res[1] / res[2]]
    assert all(3.0 <= r <= 5.0 for r in ratios), ratios


def test_residual_fault_injection():
    spec = load_spec(SINE_HEAT)
    field = solve_bi(spec, small_grid(spec))
    background = residual(spec, field).max
    k, i = 100, 60
    field.v[k, i] += 0.1
    r = residual(spec, field)
    assert r.max > 10 * background
    spike = np.nanmax(np.abs(r.values[k - 1, i - 2 : i + 3]))
    assert spike > 10 * background
