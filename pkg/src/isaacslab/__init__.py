"""Grid solvers and Monte-Carlo verification for zero-sum stochastic differential games."""

__version__ = "0.1.0"

from .expr import Expr, ExprError, parse
from .hamiltonian import Hamiltonian, check_saddle_inequalities, h_lower, h_upper, isaacs_gap, select_saddle
from .model import ConfigError, ControlSet, GameSpec, Scenario, load_scenario, load_spec
from .sde import ConstantPolicy, ExpressionPolicy, SaddlePolicy, TabulatedPolicy, simulate, star_policies
from .solver import Grid, ValueField, residual, solve_bi, solve_hjb_control
from .verify import (
    MCParams,
    estimate_game_values,
    fundamental_decomposition,
    payoff,
    verify_control,
    verify_saddle,
)

__all__ = [
    "__version__",
    "Expr",
    "ExprError",
    "parse",
    "Hamiltonian",
    "check_saddle_inequalities",
    "h_lower",
    "h_upper",
    "isaacs_gap",
    "select_saddle",
    "ConfigError",
    "ControlSet",
    "GameSpec",
    "Scenario",
    "load_scenario",
    "load_spec",
    "ConstantPolicy",
    "ExpressionPolicy",
    "SaddlePolicy",
    "TabulatedPolicy",
    "simulate",
    "star_policies",
    "Grid",
    "ValueField",
    "residual",
    "solve_bi",
    "solve_hjb_control",
    "MCParams",
    "estimate_game_values",
    "fundamental_decomposition",
    "payoff",
    "verify_control",
    "verify_saddle",
]
