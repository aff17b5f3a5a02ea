import numpy as np
import pytest

from isaacslab.cli import resolve_scenario
from isaacslab.model import load_scenario, load_scenario_text
from isaacslab.solver import Grid, solve_bi

SINE_HEAT = """
[model]
name = "sine_heat"
d = 1
m = 1
T = 1.0
[dynamics]
b = "0"
f1 = "u1_1 - u2_1"
sigma = "0.5"
[cost]
l = "u2_1^2/2 - u1_1^2/2"
g = "sin(x1)"
[controls.u1]
lo = -1
hi = 1
points = 21
[controls.u2]
lo = -1
hi = 1
points = 21
"""


def make_spec(**overrides):
    """Sine-heat config with selected fields replaced (keys: b, f1, sigma, l, g, T, points)."""
    text = SINE_HEAT
    for key in ("b", "f1", "sigma", "l", "g"):
        if key in overrides:
            old = next(line for line in text.splitlines() if line.startswith(f"{key} ="))
            text = text.replace(old, f'{key} = "{overrides[key]}"')
    if "points" in overrides:
        text = text.replace("points = 21", f"points = {overrides['points']}")
    return load_scenario_text(text).spec


def bundled(name):
    return load_scenario(resolve_scenario(name))


def solve_scenario(name, side=None):
    sc = bundled(name)
    g = sc.grid
    grid = Grid.for_spec(sc.spec, g["lo"], g["hi"], g["n"], g["nt"])
    return sc, solve_bi(sc.spec, grid, side or sc.solver.get("side", "upper"))


@pytest.fixture(scope="session")
def sine_heat():
    return solve_scenario("sine_heat")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# ------------------------------------------------------- acceptance summary

ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
