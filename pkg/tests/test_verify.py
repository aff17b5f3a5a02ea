import numpy as np
import pytest

from isaacslab.model import load_spec
from isaacslab.sde import ConstantPolicy, SaddlePolicy, star_policies
from isaacslab.solver import Grid, solve_bi, solve_hjb_control
from isaacslab.verify import (
    MCParams,
    estimate_game_values,
    fundamental_decomposition,
    payoff,
    verify_control,
    verify_saddle,
)

from conftest import make_spec
from test_solver import CONTROL

X0 = [np.pi / 2]
SMALL = MCParams(n_paths=4000, n_steps=100, seed=3)


def consts(cs, *values):
    return [ConstantPolicy(cs, [v]) for v in values]


def test_constant_payoff_is_exact():
    spec = make_spec(l="0", g="1.75")
    p1, p2 = consts(spec.U1, 0.3)[0], consts(spec.U2, -0.2)[0]
    est = payoff(spec, p1, p2, 0.0, [0.0], SMALL)
    assert est.mean == 1.75 and est.se == 0.0
    assert not est.ill_defined and est.upper == est.lower == 1.75


def test_payoff_is_running_plus_terminal():
    spec = make_spec()
    est = payoff(spec, *consts(spec.U1, 0.5), *consts(spec.U2, -0.5), 0.0, X0, SMALL)
    assert est.mean == est.running_mean + est.terminal_mean
    assert est.running_mean == pytest.approx(0.125 - 0.125, abs=1e-15)


def test_zero_controls_reach_heat_value():
    spec = make_spec()
    est = payoff(spec, *consts(spec.U1, 0.0), *consts(spec.U2, 0.0), 0.0, X0, MCParams(20000, 20, 7))
    assert abs(est.mean - np.exp(-0.125)) <= 3 * est.se


def test_non_finite_payoff_is_flagged():
    spec = make_spec(b="x1^3", f1="0", sigma="0.1")
    est = payoff(spec, *consts(spec.U1, 0.0), *consts(spec.U2, 0.0), 0.0, [50.0], MCParams(10, 20, 0))
    assert est.ill_defined and est.upper == np.inf and est.lower == -np.inf


def test_decomposition_star_and_deviation(sine_heat):
    sc, field = sine_heat
    z1, z2 = star_policies(sc.spec, field)
    mc = MCParams(5000, 200, 11)
    star = fundamental_decomposition(sc.spec, field, z1, z2, 0.0, X0, mc)
    assert np.all(star.integral == 0.0)
    assert abs(star.mean) <= 3 * star.se
    dev = fundamental_decomposition(sc.spec, field, consts(sc.spec.U1, 1.0)[0], z2, 0.0, X0, mc)
    # integrand -(p - 1)^2 / 2 <= 0 per step
    assert np.all(dev.integral <= 1e-15)
    assert abs(dev.mean) <= 3 * dev.se
    assert dev.mean_payoff < dev.v
    assert dev.correlation > 0.99


def test_decomposition_deterministic_cancellation():
    spec = make_spec(b="0", f1="0", sigma="0", g="sin(x1)")
    grid = Grid.for_spec(spec, -np.pi, 2 * np.pi, 61, 11)
    field = solve_bi(spec, grid)
    z1, z2 = star_policies(spec, field)
    rep = fundamental_decomposition(spec, field, z1, z2, 0.0, X0, MCParams(50, 10, 0))
    assert np.max(np.abs(rep.residuals)) <= 1e-12
    assert rep.se == 0.0 and rep.passed


def test_saddle_with_all_zero_model():
    spec = make_spec(b="0", f1="0", sigma="0", l="0", g="x1")
    field = solve_bi(spec, Grid.for_spec(spec, -2.0, 2.0, 21, 11))
    rep = verify_saddle(spec, field, consts(spec.U1, 1.0), consts(spec.U2, -1.0), 0.0, [0.5], SMALL)
    assert rep.passed
    assert rep.star.mean == 0.5
    # equality in every inequality; the value row only differs by interpolation round-off
    assert all(r.diff == 0.0 for r in rep.rows[1:])
    assert abs(rep.rows[0].diff) <= 1e-15


def test_game_values_all_zero_model():
    spec = make_spec(b="0", f1="0", sigma="0", l="0", g="x1")
    field = solve_bi(spec, Grid.for_spec(spec, -2.0, 2.0, 21, 11))
    z1, z2 = star_policies(spec, field)
    rep = estimate_game_values(spec, field, [z1, *consts(spec.U1, 1.0)], [z2, *consts(spec.U2, 0.0)], 0.0, [0.5], SMALL)
    assert np.all(rep.means == 0.5)
    assert rep.sup_inf == rep.inf_sup == 0.5 and rep.passed
    assert rep.star_index == (0, 0)


def test_bilinear_value_gap_without_stars():
    spec = make_spec(f1="u1_1*u2_1", l="0", g="x1", points=2)
    fam1 = consts(spec.U1, -1.0, 0.5, 1.0)
    fam2 = consts(spec.U2, -1.0, 0.5, 1.0)
    rep = estimate_game_values(spec, None, fam1, fam2, 0.0, [0.0], MCParams(2000, 50, 1))
    assert rep.star_index is None
    # common noise shifts every entry by the same sample mean of 0.5 W_T
    shift = rep.means[0, 0] - 1.0
    assert rep.sup_inf == pytest.approx(-0.5 + shift, abs=1e-12)
    assert rep.inf_sup == pytest.approx(0.5 + shift, abs=1e-12)
    assert rep.sup_inf < rep.inf_sup - 3 * rep.max_se


def control_field(spec, n=121, nt=201):
    return solve_hjb_control(spec, Grid.for_spec(spec, -np.pi, 2 * np.pi, n, nt))


def test_verify_control_zero_drift():
    spec = load_spec(CONTROL.format(f1="0", l="u_1^2", g="sin(x1)", points=41))
    field = control_field(spec)
    rep = verify_control(spec, field, consts(spec.U2, 0.5, -1.0), 0.0, X0, SMALL)
    assert rep.passed
    assert np.all(rep.star.samples == rep.star.samples)  # finite
    assert all(e.mean > rep.v for e in rep.family)


def test_verify_control_all_tie():
    spec = load_spec(CONTROL.format(f1="0", l="0", g="sin(x1)", points=5))
    field = control_field(spec)
    rep = verify_control(spec, field, consts(spec.U2, 1.0, -2.0), 0.0, X0, SMALL)
    assert rep.passed
    assert all(e.mean == rep.star.mean for e in rep.family)


def test_verify_control_rejects_games(sine_heat):
    sc, field = sine_heat
    with pytest.raises(ValueError):
        verify_control(sc.spec, field, [], 0.0, X0, SMALL)


def test_synthesised_entries_are_skipped():
    spec = load_spec(CONTROL.format(f1="0", l="u_1^2", g="sin(x1)", points=41))
    field = control_field(spec)
    rep = verify_control(spec, field, [SaddlePolicy(spec, field, 2)], 0.0, X0, SMALL)
    assert rep.family == [] and len(rep.rows) == 1
