import numpy as np
import pytest

from isaacslab.hamiltonian import (
    Hamiltonian,
    check_saddle_inequalities,
    h0_cv,
    h_lower,
    h_upper,
    hamiltonian_report,
    isaacs_gap,
    matrix_gap,
    matrix_lower,
    matrix_saddle_violation,
    matrix_select,
    matrix_upper,
    select_saddle,
)

from conftest import SINE_HEAT, make_spec
from isaacslab.model import load_spec

BILINEAR = dict(f1="u1_1*u2_1", l="0", points=2)


@pytest.fixture(scope="module")
def heat():
    return load_spec(SINE_HEAT)


def test_h0_cv_examples(heat):
    assert h0_cv(heat, 0.0, [0.0], [0.8], [0.8], [0.8]) == pytest.approx(0.0, abs=1e-15)
    assert h0_cv(heat, 0.0, [0.0], [1.0], [1.0], [0.0]) == pytest.approx(0.5)
    assert h0_cv(make_spec(f1="0", l="1"), 0.3, [2.0], [5.0], [0.1], [0.2]) == 1.0


def test_h_lower_upper_sine_heat(heat):
    v, u1 = h_lower(heat, 0.0, [0.0], [0.6])
    assert v == pytest.approx(0.0, abs=1e-15) and u1[0] == 0.6
    v, u2 = h_upper(heat, 0.0, [0.0], [0.6])
    assert v == pytest.approx(0.0, abs=1e-15) and u2[0] == 0.6


def test_bilinear_values():
    spec = make_spec(**BILINEAR)
    assert h_lower(spec, 0.0, [0.0], [0.7])[0] == pytest.approx(-0.7)
    assert h_upper(spec, 0.0, [0.0], [0.7])[0] == pytest.approx(0.7)
    assert isaacs_gap(spec, [(0.0, [0.0], [0.7])]) == pytest.approx(1.4)
    assert isaacs_gap(spec, [(0.0, [0.0], [0.0])]) == 0.0


def test_constant_cost():
    spec = make_spec(f1="0", l="0")
    assert h_lower(spec, 0.0, [1.0], [3.0])[0] == 0.0
    spec = make_spec(f1="0", l="2.5")
    assert h_upper(spec, 0.0, [1.0], [3.0])[0] == 2.5


def test_select_saddle_examples(heat):
    u1, u2 = select_saddle(heat, 0.0, [0.0], [0.6])
    assert (u1[0], u2[0]) == (0.6, 0.6)
    u1, u2 = select_saddle(heat, 0.0, [0.0], [2.0])
    assert (u1[0], u2[0]) == (1.0, 1.0)
    # all ties resolve to the first grid point
    tie = make_spec(f1="0", l="0")
    u1, u2 = select_saddle(tie, 0.0, [0.0], [0.3])
    assert (u1[0], u2[0]) == (-1.0, -1.0)


def test_check_saddle_inequalities(heat):
    ok, worst = check_saddle_inequalities(heat, 0.0, [0.0], [0.6], [0.6], [0.6])
    assert ok and worst == 0.0
    spec = make_spec(**BILINEAR)
    for u1 in (-1.0, 1.0):
        for u2 in (-1.0, 1.0):
            ok, worst = check_saddle_inequalities(spec, 0.0, [0.0], [0.7], [u1], [u2])
            assert not ok and worst == pytest.approx(1.4)
    tie = make_spec(f1="0", l="0")
    assert check_saddle_inequalities(tie, 0.0, [0.0], [0.7], [0.1], [-0.4])[0]


def test_report(heat):
    rep = hamiltonian_report(heat, 0.0, [0.0], [0.6])
    assert rep.gap == pytest.approx(0.0, abs=1e-15)
    assert heat.U1.points[rep.argmax_u1][0] == 0.6


def test_separable_gap_is_zero(heat, rng):
    S = rng.uniform(0, 1, 1000)
    X = rng.uniform(-3, 3, (1000, 1))
    P = rng.uniform(-3, 3, (1000, 1))
    assert isaacs_gap(heat, (S, X, P)) <= 1e-12
    other = make_spec(f1="sin(u1_1) + u2_1^3", l="x1*u1_1^2 - cos(u2_1) + s")
    assert isaacs_gap(other, (S, X, P)) <= 1e-12


def test_lower_never_exceeds_upper(rng):
    spec = make_spec(f1="u1_1*u2_1 + sin(3*u1_1)", l="(u1_1 - u2_1)^2 * x1", points=9)
    eng = Hamiltonian(spec)
    X = rng.uniform(-2, 2, (500, 1))
    P = rng.uniform(-5, 5, (500, 1))
    assert np.all(eng.lower(0.0, X, P)[0] <= eng.upper(0.0, X, P)[0] + 1e-12)


def test_shift_invariance_of_selection(rng):
    # adding <b, p> (control independent) leaves the selected indices unchanged
    M = rng.normal(size=(50, 7, 9))
    shifted = M + rng.normal(size=(50, 1, 1))
    i, j = matrix_select(M)
    i2, j2 = matrix_select(shifted)
    np.testing.assert_array_equal(i, i2)
    np.testing.assert_array_equal(j, j2)


def test_monotone_refinement(rng):
    # lower = max_rows min_cols, upper = min_cols max_rows on nested subsets
    for _ in range(50):
        M = rng.normal(size=(12, 10))
        rows = np.sort(rng.choice(12, 5, replace=False))
        cols = np.sort(rng.choice(10, 4, replace=False))
        sub = M[np.ix_(rows, cols)]
        more_rows = M[:, cols]
        more_cols = M[rows, :]
        assert matrix_lower(more_rows)[0] >= matrix_lower(sub)[0]
        assert matrix_upper(more_rows)[0] >= matrix_upper(sub)[0]
        assert matrix_lower(more_cols)[0] <= matrix_lower(sub)[0]
        assert matrix_upper(more_cols)[0] <= matrix_upper(sub)[0]


def test_matrix_primitives():
    M = np.array([[3.0, 1.0], [2.0, 2.0]])
    assert matrix_lower(M)[0] == 2.0 and matrix_upper(M)[0] == 2.0
    assert matrix_gap(M) == 0.0
    i, j = matrix_select(M)
    assert (i, j) == (1, 1)
    assert matrix_saddle_violation(M, i, j) == 0.0
    assert matrix_saddle_violation(M, 0, 0) == 2.0


def _brute_all(eng, X, P):
    return eng._brute(0.0, X, P, ("v_low", "i1", "v_up", "i2"))


@pytest.mark.parametrize(
    "f1,l,points",
    [
        ("u1_1 - u2_1", "u2_1^2/2 - u1_1^2/2", 21),
        ("u1_1*u2_1", "0", 2),
        ("u1_1*u2_1 + 0.25*u2_1", "u1_1^2 - 0.5*u2_1", 9),
        ("0", "0", 5),
    ],
)
def test_affine_selector_matches_brute_force(f1, l, points, rng):
    spec = make_spec(f1=f1, l=l, points=points)
    eng = Hamiltonian(spec)
    assert eng._selector is not None
    X = np.zeros((20000, 1))
    P = rng.normal(scale=2.0, size=(20000, 1))
    # include the crossing points themselves, where ties change
    P[: eng._selector.breaks.size, 0] = eng._selector.breaks
    fast = eng.all(0.0, X, P)
    slow = _brute_all(eng, X, P)
    for key in ("v_low", "i1", "v_up", "i2"):
        np.testing.assert_array_equal(fast[key], slow[key])


def test_state_dependent_model_uses_brute_force():
    eng = Hamiltonian(make_spec(l="x1*u1_1"))
    assert eng._selector is None and eng.depends_on_state
