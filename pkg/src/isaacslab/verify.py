"""Monte-Carlo payoffs and statistical checks of the verification results.

Every check is a gate of the form ``|difference| <= 3 SE (+ allowance)``,
where the allowance for comparisons against the grid value ``v`` is
``5 * max|residual|`` of the solved field.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import hamiltonian_for
from .model import GameSpec
from .sde import (
    ConstantPolicy,
    FeedbackPolicy,
    PathBundle,
    SaddlePolicy,
    SimulationError,
    _mean_se,
    simulate,
    star_policies,
)
from .solver import ValueField, residual

logger = logging.getLogger(__name__)

__all__ = [
    "MCParams",
    "PayoffEstimate",
    "CheckRow",
    "DecompositionReport",
    "SaddleReport",
    "GameValueReport",
    "ControlReport",
    "payoff",
    "payoff_from_bundle",
    "scheme_allowance",
    "fundamental_decomposition",
    "verify_saddle",
    "estimate_game_values",
    "verify_control",
]

SE_GATE = 3.0
RESIDUAL_FACTOR = 5.0
# relative floor so exact ties survive rounding in interpolation and sums
ROUND_OFF = 1e-12


def _floor(*values) -> float:
    return ROUND_OFF * (1.0 + max(abs(float(v)) for v in values))


@dataclass(frozen=True)
class MCParams:
    n_paths: int = 20000
    n_steps: int = 400
    seed: int = 0
    workers: int = 1


@dataclass
class PayoffEstimate:
    """Monte-Carlo estimate of J(t, x; z1, z2)."""

    mean: float
    se: float
    n_paths: int
    terminal_mean: float
    running_mean: float
    nonfinite_fraction: float
    samples: np.ndarray = field(repr=False, default=None)
    labels: tuple = ("", "")

    @property
    def ill_defined(self) -> bool:
        return self.nonfinite_fraction > 0

    @property
    def upper(self) -> float:
        """J+ : the estimate, or +inf when the payoff is not well defined."""
        return np.inf if self.ill_defined else self.mean

    @property
    def lower(self) -> float:
        """J- : the estimate, or -inf when the payoff is not well defined."""
        return -np.inf if self.ill_defined else self.mean


@dataclass
class CheckRow:
    check: str
    lhs: float
    rhs: float
    diff: float
    se: float
    tolerance: float
    passed: bool

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def payoff_from_bundle(spec: GameSpec, bundle: PathBundle) -> PayoffEstimate:
    terminal = spec.terminal_cost(bundle.y[:, -1]) if not bundle.failed else _safe_terminal(spec, bundle)
    total = bundle.running + terminal
    finite = np.isfinite(total)
    frac = 1.0 - finite.mean()
    if frac > 0:
        logger.warning("payoff ill-defined on %d of %d paths", int((~finite).sum()), total.size)
        return PayoffEstimate(np.nan, np.nan, bundle.n_paths, np.nan, np.nan, float(frac), total, bundle.labels)
    t_mean, _ = _mean_se(terminal)
    r_mean, _ = _mean_se(bundle.running)
    _, se = _mean_se(total)
    return PayoffEstimate(
        mean=t_mean + r_mean,
        se=se,
        n_paths=bundle.n_paths,
        terminal_mean=t_mean,
        running_mean=r_mean,
        nonfinite_fraction=0.0,
        samples=total,
        labels=bundle.labels,
    )


def _safe_terminal(spec, bundle):
    out = np.full(bundle.n_paths, np.nan)
    ok = np.all(np.isfinite(bundle.y[:, -1]), axis=1)
    if np.any(ok):
        out[ok] = spec.terminal_cost(bundle.y[ok, -1])
    return out


def _sim(spec, p1, p2, t, x0, mc: MCParams) -> PathBundle:
    return simulate(spec, p1, p2, t, x0, mc.n_paths, mc.n_steps, mc.seed, mc.workers)


def payoff(spec: GameSpec, policy1: FeedbackPolicy, policy2: FeedbackPolicy, t, x0, mc: MCParams) -> PayoffEstimate:
    """Mean of running cost plus terminal cost over simulated paths (1-sigma SE)."""
    return payoff_from_bundle(spec, _sim(spec, policy1, policy2, t, x0, mc))


def scheme_allowance(spec: GameSpec, field: ValueField) -> float:
    """``5 * max|residual|`` of the field, cached on the field."""
    if "residual_max" not in field.scheme:
        field.scheme["residual_max"] = residual(spec, field).max
    return RESIDUAL_FACTOR * field.scheme["residual_max"]


def _paired_se(a: PayoffEstimate, b: PayoffEstimate) -> float:
    return _mean_se(a.samples - b.samples)[1]


# ------------------------------------------------------------ decomposition


@dataclass
class DecompositionReport:
    """Per-path ``R = J~ - v(t,x) - int (H0_CV - H0) dr`` and its statistics."""

    v: float
    mean_payoff: float
    mean_integral: float
    mean: float
    se: float
    correlation: float
    n_paths: int
    allowance: float
    residuals: np.ndarray = field(repr=False, default=None)
    stochastic_integral: np.ndarray = field(repr=False, default=None)
    integral: np.ndarray = field(repr=False, default=None)

    @property
    def zscore(self) -> float:
        return abs(self.mean) / self.se if self.se > 0 else (0.0 if self.mean == 0 else np.inf)

    @property
    def passed(self) -> bool:
        return abs(self.mean) <= self.tolerance

    @property
    def tolerance(self) -> float:
        return SE_GATE * self.se + self.allowance + _floor(self.v, self.mean_payoff)

    def rows(self) -> list:
        return [
            CheckRow(
                "mean(R) = 0",
                self.mean,
                0.0,
                self.mean,
                self.se,
                self.tolerance,
                self.passed,
            ),
            CheckRow(
                "E[J~] - v = E[integral]",
                self.mean_payoff - self.v,
                self.mean_integral,
                self.mean,
                self.se,
                self.tolerance,
                self.passed,
            ),
        ]


def fundamental_decomposition(
    spec: GameSpec,
    field: ValueField,
    policy1: FeedbackPolicy,
    policy2: FeedbackPolicy,
    t,
    x0,
    mc: MCParams,
    side: str | None = None,
) -> DecompositionReport:
    """Split simulated payoffs into ``v``, the Hamiltonian integral and a martingale part.

    The integral and the discrete stochastic integral ``sum Dv sigma dW``
    use the same left-end points and gradient interpolation as the
    simulator.
    """
    side = side or field.side
    bundle = _sim(spec, policy1, policy2, t, x0, mc)
    if bundle.failed:
        raise SimulationError(f"simulation failed at path {bundle.failed_path}")
    engine = hamiltonian_for(spec)
    J = bundle.running + spec.terminal_cost(bundle.y[:, -1])
    integral = np.zeros(bundle.n_paths)
    stoch = np.zeros(bundle.n_paths)
    for k in range(bundle.n_steps):
        s = bundle.t + k * bundle.dt
        Y = bundle.y[:, k]
        P, _ = field.grad_at(s, Y)
        u1, u2 = bundle.u1[:, k], bundle.u2[:, k]
        hcv = np.sum(spec.drift_f1(s, Y, u1, u2) * P, axis=-1) + spec.running_cost(s, Y, u1, u2)
        integral += (hcv - engine.value(side, s, Y, P)) * bundle.dt
        sig = spec.diffusion(s, Y)
        stoch += np.sum(P * np.sum(sig * bundle.dW[:, k][:, None, :], axis=-1), axis=-1)
    v0 = float(field.value_at(t, np.atleast_1d(x0)[None, :])[0])
    R = J - v0 - integral
    mean, se = _mean_se(R)
    if np.std(R) > 0 and np.std(stoch) > 0:
        corr = float(np.corrcoef(R, stoch)[0, 1])
    else:
        corr = float("nan")
    return DecompositionReport(
        v=v0,
        mean_payoff=_mean_se(J)[0],
        mean_integral=_mean_se(integral)[0],
        mean=mean,
        se=se,
        correlation=corr,
        n_paths=bundle.n_paths,
        allowance=scheme_allowance(spec, field),
        residuals=R,
        stochastic_integral=stoch,
        integral=integral,
    )


# ------------------------------------------------------------------ saddle


@dataclass
class SaddleReport:
    v: float
    allowance: float
    star: PayoffEstimate
    deviations: list  # (player, PayoffEstimate)
    rows: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def verify_saddle(
    spec: GameSpec,
    field: ValueField,
    deviation_policies1: list,
    deviation_policies2: list,
    t,
    x0,
    mc: MCParams,
) -> SaddleReport:
    """Check ``J(z1, z2*) <= J(z1*, z2*) <= J(z1*, z2)`` and ``J(z1*, z2*) = v``.

    All simulations share the seed, so differences use paired standard errors.
    """
    z1, z2 = star_policies(spec, field)
    star = payoff(spec, z1, z2, t, x0, mc)
    v0 = float(field.value_at(t, np.atleast_1d(x0)[None, :])[0])
    allowance = scheme_allowance(spec, field)
    tol = SE_GATE * star.se + allowance + _floor(star.mean, v0)
    rows = [
        CheckRow("J(z1*,z2*) = v(t,x)", star.mean, v0, star.mean - v0, star.se, tol, abs(star.mean - v0) <= tol)
    ]
    deviations = []
    for dev in deviation_policies1:
        est = payoff(spec, dev, z2, t, x0, mc)
        se = _paired_se(est, star)
        diff = est.mean - star.mean
        tol_d = SE_GATE * se + _floor(est.mean, star.mean)
        rows.append(CheckRow(f"J({dev.label},z2*) <= J(z1*,z2*)", est.mean, star.mean, diff, se, tol_d, diff <= tol_d))
        deviations.append((1, est))
    for dev in deviation_policies2:
        est = payoff(spec, z1, dev, t, x0, mc)
        se = _paired_se(est, star)
        diff = star.mean - est.mean
        tol_d = SE_GATE * se + _floor(est.mean, star.mean)
        rows.append(CheckRow(f"J(z1*,z2*) <= J(z1*,{dev.label})", star.mean, est.mean, diff, se, tol_d, diff <= tol_d))
        deviations.append((2, est))
    return SaddleReport(v=v0, allowance=allowance, star=star, deviations=deviations, rows=rows)


# -------------------------------------------------------------- game value


@dataclass
class GameValueReport:
    labels1: list
    labels2: list
    means: np.ndarray
    ses: np.ndarray
    sup_inf: float
    inf_sup: float
    star_index: tuple | None
    v: float
    rows: list

    @property
    def max_se(self) -> float:
        return float(np.max(self.ses))

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def _star_position(family, player):
    for i, p in enumerate(family):
        if isinstance(p, SaddlePolicy) and p.player == player:
            return i
    return None


def estimate_game_values(
    spec: GameSpec,
    field: ValueField,
    family1: list,
    family2: list,
    t,
    x0,
    mc: MCParams,
) -> GameValueReport:
    """Payoff matrix over finite policy families, with its sup-inf and inf-sup.

    When both families contain the synthesised saddle policies, both values
    are checked against J(z1*, z2*) within ``3 * max SE``.
    """
    if not family1 or not family2:
        raise ValueError("policy families must be non-empty")
    means = np.empty((len(family1), len(family2)))
    ses = np.empty_like(means)
    for i, p1 in enumerate(family1):
        for j, p2 in enumerate(family2):
            est = payoff(spec, p1, p2, t, x0, mc)
            means[i, j] = est.mean
            ses[i, j] = est.se
    sup_inf = float(means.min(axis=1).max())
    inf_sup = float(means.max(axis=0).min())
    max_se = float(ses.max())
    tol = SE_GATE * max_se + _floor(sup_inf, inf_sup)
    rows = [CheckRow("sup-inf <= inf-sup", sup_inf, inf_sup, sup_inf - inf_sup, max_se, tol, sup_inf - inf_sup <= tol)]
    i_star = _star_position(family1, 1)
    j_star = _star_position(family2, 2)
    star = (i_star, j_star) if i_star is not None and j_star is not None else None
    if star is not None:
        j_val = means[star]
        rows.append(CheckRow("sup-inf = J(z1*,z2*)", sup_inf, j_val, sup_inf - j_val, max_se, tol, abs(sup_inf - j_val) <= tol))
        rows.append(CheckRow("inf-sup = J(z1*,z2*)", inf_sup, j_val, inf_sup - j_val, max_se, tol, abs(inf_sup - j_val) <= tol))
    v0 = float(field.value_at(t, np.atleast_1d(x0)[None, :])[0]) if field is not None else float("nan")
    return GameValueReport(
        labels1=[p.label for p in family1],
        labels2=[p.label for p in family2],
        means=means,
        ses=ses,
        sup_inf=sup_inf,
        inf_sup=inf_sup,
        star_index=star,
        v=v0,
        rows=rows,
    )


# ----------------------------------------------------------------- control


@dataclass
class ControlReport:
    v: float
    allowance: float
    star: PayoffEstimate
    family: list  # PayoffEstimate per policy
    rows: list

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def verify_control(
    spec: GameSpec,
    field: ValueField,
    policy_family: list,
    t,
    x0,
    mc: MCParams,
    abs_tol: float = 0.0,
) -> ControlReport:
    """Check ``J(z) >= v`` on the family and ``J(z*) = v`` for the synthesised control.

    ``policy_family`` holds policies on the controller's set; a synthesised
    entry is allowed and skipped (the optimal policy is always added).
    ``abs_tol`` is added to the tolerance of the optimality check.
    """
    if not spec.is_control:
        raise ValueError("verify_control needs a control problem")
    frozen = ConstantPolicy(spec.U1, spec.U1.points[0], label="-")
    z_star = SaddlePolicy(spec, field, 2, label="z*")
    star = payoff(spec, frozen, z_star, t, x0, mc)
    v0 = float(field.value_at(t, np.atleast_1d(x0)[None, :])[0])
    allowance = scheme_allowance(spec, field)
    tol = SE_GATE * star.se + allowance + abs_tol + _floor(star.mean, v0)
    rows = [CheckRow("J(z*) = v(t,x)", star.mean, v0, star.mean - v0, star.se, tol, abs(star.mean - v0) <= tol)]
    ests = []
    for pol in policy_family:
        if isinstance(pol, SaddlePolicy):
            continue
        est = payoff(spec, frozen, pol, t, x0, mc)
        ests.append(est)
        diff = est.mean - v0
        tol_f = SE_GATE * est.se + _floor(est.mean, v0)
        rows.append(CheckRow(f"J({pol.label}) >= v(t,x)", est.mean, v0, diff, est.se, tol_f, diff >= -tol_f))
    return ControlReport(v=v0, allowance=allowance, star=star, family=ests, rows=rows)
