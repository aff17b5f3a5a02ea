"""Game specification, scenario loading and static diagnostics."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
import tomlkit

from .expr import Expr, ExprError

logger = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "ControlSet",
    "GameSpec",
    "Scenario",
    "SampleCloud",
    "DiagnosticsReport",
    "load_spec",
    "load_scenario",
    "load_scenario_text",
    "canonical_config",
    "eval_dynamics",
    "sample_cloud",
    "check_linear_growth",
    "check_novikov_boundedness",
]


class ConfigError(ValueError):
    """Invalid scenario configuration."""


# --------------------------------------------------------------------------
# control sets


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Finite discretisation of a compact box of controls.

    ``points`` has shape ``(n, k)`` and is sorted lexicographically; the row
    order is the enumeration order used for tie-breaking everywhere.
    """

    lo: np.ndarray
    hi: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if pts.size == 0 or pts.shape[0] == 0:
            raise ConfigError("control set is empty")
        if lo.shape != hi.shape or lo.shape[0] != pts.shape[1]:
            raise ConfigError("control set bounds do not match point dimension")
        if np.any(lo > hi):
            raise ConfigError("control set has lo > hi")
        if not np.all(np.isfinite(pts)):
            raise ConfigError("control points must be finite")
        if np.any(pts < lo) or np.any(pts > hi):
            raise ConfigError("control point outside bounds")
        order = np.lexsort(pts.T[::-1])
        pts = pts[order]
        for name, arr in (("lo", lo), ("hi", hi), ("points", pts)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def grid(cls, lo, hi, n) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        n = np.broadcast_to(np.atleast_1d(np.asarray(n, dtype=int)), lo.shape)
        if np.any(n < 1):
            raise ConfigError("control grid needs at least one point per axis")
        axes = []
        for a, b, k in zip(lo, hi, n):
            if k == 1:
                ax = np.array([0.5 * (a + b)])
            else:
                # snap to a decimal lattice so configured values such as 0.6 are hit exactly
                ax = np.clip(np.round(np.linspace(a, b, k), 12), a, b)
            axes.append(ax)
        pts = np.array(list(product(*axes)), dtype=float)
        return cls(lo, hi, pts)

    @classmethod
    def singleton(cls, value=0.0) -> "ControlSet":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(v, v, v[None, :])

    @property
    def k(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def clamp(self, u):
        return np.clip(u, self.lo, self.hi)

    def index_of(self, u) -> int:
        """Index of the grid point equal to ``u`` (within 1e-12)."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        hits = np.flatnonzero(np.all(np.abs(self.points - u) <= 1e-12, axis=1))
        if hits.size == 0:
            raise ValueError(f"{u} is not a point of the control grid")
        return int(hits[0])


# --------------------------------------------------------------------------
# game specification

_BUILTINS = ("zero", "identity")


def _state_vars(d):
    return {"s"} | {f"x{i + 1}" for i in range(d)}


@dataclass(frozen=True, eq=False)
class GameSpec:
    """Full model of a zero-sum game (or of a control problem).

    A control problem is stored as a game whose maximising player has a
    single admissible control; ``U2`` is then the controller's set and the
    variables ``u_j`` of the configuration are renamed to ``u2_j``.
    """

    d: int
    m: int
    T: float
    b: tuple
    f1: tuple
    sigma: tuple
    l: Expr
    g: Expr
    U1: ControlSet
    U2: ControlSet
    name: str = "game"
    kind: str = "game"
    builtins: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.T < np.inf):
            raise ConfigError("horizon T must satisfy 0 < T < inf")
        if len(self.b) != self.d or len(self.f1) != self.d:
            raise ConfigError("b and f1 must have d components")
        if len(self.sigma) != self.d or any(len(row) != self.m for row in self.sigma):
            raise ConfigError("sigma must be a d x m matrix")
        state = _state_vars(self.d)
        controls = {f"u1_{j + 1}" for j in range(self.U1.k)} | {f"u2_{j + 1}" for j in range(self.U2.k)}
        for label, exprs, allowed in (
            ("b", self.b, state),
            ("sigma", [e for row in self.sigma for e in row], state),
            ("f1", self.f1, state | controls),
            ("l", [self.l], state | controls),
            ("g", [self.g], {f"x{i + 1}" for i in range(self.d)}),
        ):
            for e in exprs:
                bad = set(e.free_vars) - allowed
                if bad:
                    raise ConfigError(f"{label} = {e.source!r} uses disallowed variables {sorted(bad)}")

    @property
    def is_control(self) -> bool:
        return self.kind == "control"

    # -- environments -------------------------------------------------------

    def state_env(self, s, X) -> dict:
        X = np.asarray(X, dtype=float)
        env = {"s": s}
        for i in range(self.d):
            env[f"x{i + 1}"] = X[..., i]
        return env

    def control_env(self, U1v, U2v) -> dict:
        env = {}
        U1v = np.asarray(U1v, dtype=float)
        U2v = np.asarray(U2v, dtype=float)
        for j in range(self.U1.k):
            env[f"u1_{j + 1}"] = U1v[..., j]
        for j in range(self.U2.k):
            env[f"u2_{j + 1}"] = U2v[..., j]
        return env

    @staticmethod
    def _fill(value, shape):
        return np.broadcast_to(np.asarray(value, dtype=float), shape)

    # -- vectorised coefficients -------------------------------------------

    def drift_b(self, s, X):
        """b(s, x) for states ``X`` of shape (N, d); returns (N, d)."""
        X = np.asarray(X, dtype=float)
        env = self.state_env(s, X)
        shape = X.shape[:-1]
        return np.stack([self._fill(e(env), shape) for e in self.b], axis=-1)

    def drift_f1(self, s, X, U1v, U2v):
        X = np.asarray(X, dtype=float)
        env = self.state_env(s, X)
        env.update(self.control_env(U1v, U2v))
        shape = np.broadcast_shapes(X.shape[:-1], np.shape(U1v)[:-1], np.shape(U2v)[:-1])
        return np.stack([self._fill(e(env), shape) for e in self.f1], axis=-1)

    def drift(self, s, X, U1v, U2v):
        return self.drift_b(s, X) + self.drift_f1(s, X, U1v, U2v)

    def diffusion(self, s, X):
        """sigma(s, x) with shape (N, d, m)."""
        X = np.asarray(X, dtype=float)
        env = self.state_env(s, X)
        shape = X.shape[:-1]
        rows = [np.stack([self._fill(e(env), shape) for e in row], axis=-1) for row in self.sigma]
        return np.stack(rows, axis=-2)

    def running_cost(self, s, X, U1v, U2v):
        X = np.asarray(X, dtype=float)
        env = self.state_env(s, X)
        env.update(self.control_env(U1v, U2v))
        shape = np.broadcast_shapes(X.shape[:-1], np.shape(U1v)[:-1], np.shape(U2v)[:-1])
        return self._fill(self.l(env), shape)

    def terminal_cost(self, X):
        X = np.asarray(X, dtype=float)
        return self._fill(self.g(self.state_env(0.0, X)), X.shape[:-1])

    def depends_on(self, exprs, names) -> bool:
        return any(set(e.free_vars) & set(names) for e in exprs)

    @property
    def state_names(self) -> tuple:
        return tuple(f"x{i + 1}" for i in range(self.d))

    @property
    def sigma_exprs(self) -> list:
        return [e for row in self.sigma for e in row]


def eval_dynamics(spec: GameSpec, s: float, x, u1, u2):
    """Drift ``b + f1`` and diffusion matrix at a single point."""
    if not (0.0 <= s <= spec.T):
        raise ValueError(f"time {s} outside [0, {spec.T}]")
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    u1 = np.atleast_1d(np.asarray(u1, dtype=float))[None, :]
    u2 = np.atleast_1d(np.asarray(u2, dtype=float))[None, :]
    drift = spec.drift(s, x, u1, u2)[0]
    diffusion = spec.diffusion(s, x)[0]
    if not (np.all(np.isfinite(drift)) and np.all(np.isfinite(diffusion))):
        raise ExprError("non-finite dynamics")
    return drift, diffusion


# --------------------------------------------------------------------------
# scenario configuration


@dataclass
class Scenario:
    """A loaded configuration: the model plus run settings."""

    spec: GameSpec
    grid: dict
    mc: dict
    solver: dict
    verify: dict
    output: dict
    config: dict
    path: Path | None = None


def _number(value, where) -> float:
    """Config numbers may be literals or constant expressions such as ``"pi/2"``."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got a boolean")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            e = Expr(value)
        except ExprError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        if e.free_vars:
            raise ConfigError(f"{where}: constant expected, found variables {sorted(e.free_vars)}")
        return float(e())
    raise ConfigError(f"{where}: expected a number, got {type(value).__name__}")


def _vector(value, n, where) -> np.ndarray:
    if not isinstance(value, list):
        value = [value] * n if n > 1 and not isinstance(value, list) else [value]
    out = np.array([_number(v, f"{where}[{i}]") for i, v in enumerate(value)])
    if out.shape[0] != n:
        raise ConfigError(f"{where}: expected {n} entries, got {out.shape[0]}")
    return out


def _expr(text, where, rename) -> Expr:
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        text = repr(float(text))
    if not isinstance(text, str):
        raise ConfigError(f"{where}: expected an expression string")
    try:
        e = Expr(text)
    except ExprError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return e.rename(rename) if rename else e


def _expr_vector(value, d, where, rename, builtins) -> tuple:
    if value == "zero":
        builtins[where] = "zero"
        return tuple(Expr("0") for _ in range(d))
    if not isinstance(value, list):
        if d != 1:
            raise ConfigError(f"{where}: expected a list of {d} expressions")
        value = [value]
    if len(value) != d:
        raise ConfigError(f"{where}: expected {d} components, got {len(value)}")
    return tuple(_expr(v, f"{where}[{i}]", rename) for i, v in enumerate(value))


def _expr_matrix(value, d, m, where, rename, builtins) -> tuple:
    if value in _BUILTINS:
        builtins[where] = value
        if value == "identity" and d != m:
            raise ConfigError(f"{where}: builtin 'identity' needs d == m")
        return tuple(
            tuple(Expr("1" if (value == "identity" and i == j) else "0") for j in range(m)) for i in range(d)
        )
    if not isinstance(value, list):
        if d != 1 or m != 1:
            raise ConfigError(f"{where}: expected a {d}x{m} list of lists")
        value = [[value]]
    if d == 1 and value and not isinstance(value[0], list):
        value = [value]
    if len(value) != d or any(not isinstance(r, list) or len(r) != m for r in value):
        raise ConfigError(f"{where}: expected a {d}x{m} matrix")
    return tuple(tuple(_expr(v, f"{where}[{i}][{j}]", rename) for j, v in enumerate(r)) for i, r in enumerate(value))


def _control_set(section, where) -> ControlSet:
    if not isinstance(section, dict):
        raise ConfigError(f"missing section [{where}]")
    if "values" in section:
        vals = section["values"]
        if not isinstance(vals, list) or len(vals) == 0:
            raise ConfigError(f"[{where}] values: empty point list")
        pts = np.array(
            [[_number(c, f"{where}.values") for c in (v if isinstance(v, list) else [v])] for v in vals]
        )
        k = pts.shape[1]
        lo = _vector(section["lo"], k, f"{where}.lo") if "lo" in section else pts.min(axis=0)
        hi = _vector(section["hi"], k, f"{where}.hi") if "hi" in section else pts.max(axis=0)
        return ControlSet(lo, hi, pts)
    for key in ("lo", "hi"):
        if key not in section:
            raise ConfigError(f"[{where}] needs '{key}' (or an explicit 'values' list)")
    lo_raw = section["lo"]
    k = len(lo_raw) if isinstance(lo_raw, list) else 1
    lo = _vector(lo_raw, k, f"{where}.lo")
    hi = _vector(section["hi"], k, f"{where}.hi")
    pts = section.get("points", 21)
    n = np.array(pts if isinstance(pts, list) else [pts] * k, dtype=int)
    if n.shape[0] != k:
        raise ConfigError(f"[{where}] points: expected {k} entries")
    if np.any(n < 1):
        raise ConfigError(f"[{where}] points: empty point list")
    return ControlSet.grid(lo, hi, n)


def _section(config, name) -> dict:
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def load_scenario_text(text: str, path: Path | None = None) -> Scenario:
    try:
        config = tomlkit.parse(text).unwrap()
    except Exception as exc:  # tomlkit raises several parse error types
        raise ConfigError(f"config does not parse: {exc}") from exc

    known = {"model", "dynamics", "cost", "controls", "grid", "mc", "solver", "verify", "output"}
    unknown = set(config) - known
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    model = _section(config, "model")
    dyn = _section(config, "dynamics")
    cost = _section(config, "cost")
    controls = _section(config, "controls")
    for key in ("d", "m", "T"):
        if key not in model:
            raise ConfigError(f"[model] missing '{key}'")
    d, m = model["d"], model["m"]
    if not (isinstance(d, int) and isinstance(m, int) and d >= 1 and m >= 1):
        raise ConfigError("[model] d and m must be positive integers")
    T = _number(model["T"], "model.T")
    kind = model.get("kind", "game")
    if kind not in ("game", "control"):
        raise ConfigError("[model] kind must be 'game' or 'control'")

    if kind == "control":
        U1 = ControlSet.singleton(0.0)
        U2 = _control_set(controls.get("u"), "controls.u")
        rename = {f"u_{j + 1}": f"u2_{j + 1}" for j in range(U2.k)}
        stray = set(controls) - {"u"}
    else:
        U1 = _control_set(controls.get("u1"), "controls.u1")
        U2 = _control_set(controls.get("u2"), "controls.u2")
        rename = {}
        stray = set(controls) - {"u1", "u2"}
    if stray:
        raise ConfigError(f"unexpected control sections {sorted(stray)}")

    for key, sec in (("b", dyn), ("f1", dyn), ("sigma", dyn), ("l", cost), ("g", cost)):
        if key not in sec:
            raise ConfigError(f"missing coefficient '{key}'")
    builtins: dict = {}
    spec = GameSpec(
        d=d,
        m=m,
        T=T,
        b=_expr_vector(dyn["b"], d, "b", rename, builtins),
        f1=_expr_vector(dyn["f1"], d, "f1", rename, builtins),
        sigma=_expr_matrix(dyn["sigma"], d, m, "sigma", rename, builtins),
        l=_expr(cost["l"], "l", rename),
        g=_expr(cost["g"], "g", rename),
        U1=U1,
        U2=U2,
        name=str(model.get("name", path.stem if path else "game")),
        kind=kind,
        builtins=builtins,
    )
    if kind == "control":
        stray_u1 = {v for e in (*spec.f1, spec.l) for v in e.free_vars if v.startswith("u1_")}
        if stray_u1:
            raise ConfigError(f"control problems use u_j variables, found {sorted(stray_u1)}")

    grid = dict(_section(config, "grid"))
    if grid:
        if "lo" in grid:
            grid["lo"] = _vector(grid["lo"], d, "grid.lo").tolist()
        if "hi" in grid:
            grid["hi"] = _vector(grid["hi"], d, "grid.hi").tolist()
        if "n" in grid:
            n = grid["n"]
            grid["n"] = [int(v) for v in (n if isinstance(n, list) else [n] * d)]
    mc = dict(_section(config, "mc"))
    if "x0" in mc:
        mc["x0"] = _vector(mc["x0"], d, "mc.x0").tolist()
    if "t" in mc:
        mc["t"] = _number(mc["t"], "mc.t")
    solver = dict(_section(config, "solver"))
    if solver.get("side", "upper") not in ("upper", "lower"):
        raise ConfigError("[solver] side must be 'upper' or 'lower'")
    return Scenario(
        spec=spec,
        grid=grid,
        mc=mc,
        solver=solver,
        verify=dict(_section(config, "verify")),
        output=dict(_section(config, "output")),
        config=config,
        path=path,
    )


def load_scenario(path) -> Scenario:
    path = Path(path)
    return load_scenario_text(path.read_text(), path)


def load_spec(config: str) -> GameSpec:
    """Parse and validate configuration text into a :class:`GameSpec`."""
    return load_scenario_text(config).spec


def _control_table(cs: ControlSet) -> dict:
    # a tensor grid is echoed as lo/hi/points, anything else as explicit values
    counts = [len(np.unique(cs.points[:, j])) for j in range(cs.k)]
    try:
        regular = ControlSet.grid(cs.lo, cs.hi, counts)
        if regular.size == cs.size and np.array_equal(regular.points, cs.points):
            return {"lo": cs.lo.tolist(), "hi": cs.hi.tolist(), "points": counts}
    except (ValueError, ConfigError):
        pass
    return {"lo": cs.lo.tolist(), "hi": cs.hi.tolist(), "values": cs.points.tolist()}


def canonical_config(scenario: Scenario) -> str:
    """Normalised TOML rendering of a scenario (expressions re-printed)."""
    spec = scenario.spec
    doc = copy.deepcopy(scenario.config)
    ctrl = {"u1": "u1", "u2": "u2"} if spec.kind == "game" else {"u": "u2"}
    back = {f"u2_{j + 1}": f"u_{j + 1}" for j in range(spec.U2.k)} if spec.is_control else {}

    def src(e: Expr) -> str:
        return e.rename(back).source if back else e.source

    doc["model"] = {"name": spec.name, "kind": spec.kind, "d": spec.d, "m": spec.m, "T": spec.T}
    doc["dynamics"] = {
        "b": spec.builtins.get("b") or [src(e) for e in spec.b],
        "f1": spec.builtins.get("f1") or [src(e) for e in spec.f1],
        "sigma": spec.builtins.get("sigma") or [[src(e) for e in row] for row in spec.sigma],
    }
    doc["cost"] = {"l": src(spec.l), "g": src(spec.g)}
    doc["controls"] = {key: _control_table(spec.U1 if attr == "u1" else spec.U2) for key, attr in ctrl.items()}
    for key in ("grid", "mc", "solver", "verify", "output"):
        value = getattr(scenario, key)
        if value:
            doc[key] = value
        else:
            doc.pop(key, None)
    return tomlkit.dumps(doc)


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class SampleCloud:
    s: np.ndarray  # (N,)
    X: np.ndarray  # (N, d)
    U1: np.ndarray  # (N, k1)
    U2: np.ndarray  # (N, k2)

    def __len__(self):
        return self.s.shape[0]

    def scaled(self, factor: float) -> "SampleCloud":
        return SampleCloud(self.s, self.X * factor, self.U1, self.U2)


def sample_cloud(spec: GameSpec, n: int, radius: float, seed: int = 0) -> SampleCloud:
    """Uniform samples of time, state (box of half-width ``radius``) and grid controls.

    The origin is always included so that bounded coefficients reach their
    supremum of ``|.|/(1+|x|)``.
    """
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, spec.T, n)
    X = rng.uniform(-radius, radius, (n, spec.d))
    X[0] = 0.0
    U1 = spec.U1.points[rng.integers(0, spec.U1.size, n)]
    U2 = spec.U2.points[rng.integers(0, spec.U2.size, n)]
    return SampleCloud(s, X, U1, U2)


def _as_cloud(cloud) -> SampleCloud:
    if isinstance(cloud, SampleCloud):
        return cloud
    s, X, U1, U2 = zip(*cloud)
    return SampleCloud(
        np.asarray(s, dtype=float),
        np.atleast_2d(np.asarray(X, dtype=float)).reshape(len(s), -1),
        np.asarray(U1, dtype=float).reshape(len(s), -1),
        np.asarray(U2, dtype=float).reshape(len(s), -1),
    )


@dataclass
class DiagnosticsReport:
    """Sampled estimates of the constants in the standing hypotheses.

    None of these certify a hypothesis; they are maxima/minima over the
    sample cloud.
    """

    n_samples: int
    growth_constant: float | None = None
    growth_constant_doubled: float | None = None
    unbounded_suspicion: bool = False
    nondegeneracy: float | None = None
    novikov_bound: float | None = None
    degenerate: bool = False
    flags: list = field(default_factory=list)


def _growth(spec: GameSpec, c: SampleCloud) -> float:
    b = _per_sample_vector(spec.b, spec, c)
    f1 = _per_sample_vector(spec.f1, spec, c)
    sig = _per_sample_sigma(spec, c)
    num = np.linalg.norm(b, axis=1) + np.linalg.norm(f1, axis=1) + np.linalg.norm(sig, axis=(1, 2))
    return float(np.max(num / (1.0 + np.linalg.norm(c.X, axis=1))))


def _cloud_env(spec: GameSpec, c: SampleCloud) -> dict:
    env = spec.state_env(c.s, c.X)
    env.update(spec.control_env(c.U1, c.U2))
    return env


def _per_sample_vector(exprs, spec, c) -> np.ndarray:
    env = _cloud_env(spec, c)
    return np.stack([np.broadcast_to(np.asarray(e(env), dtype=float), c.s.shape) for e in exprs], axis=-1)


def _per_sample_sigma(spec, c) -> np.ndarray:
    env = _cloud_env(spec, c)
    return np.stack(
        [
            np.stack([np.broadcast_to(np.asarray(e(env), dtype=float), c.s.shape) for e in row], axis=-1)
            for row in spec.sigma
        ],
        axis=-2,
    )


def check_linear_growth(spec: GameSpec, cloud) -> DiagnosticsReport:
    """Estimate K with |b| + |f1| + ||sigma|| <= K (1 + |x|) on the cloud.

    The cloud is also evaluated with every state doubled; growth of the
    estimate by more than a factor 1.5 raises ``unbounded_suspicion``.
    """
    c = _as_cloud(cloud)
    if len(c) == 0:
        raise ValueError("empty sample cloud")
    k = _growth(spec, c)
    k2 = _growth(spec, c.scaled(2.0))
    report = DiagnosticsReport(n_samples=len(c), growth_constant=k, growth_constant_doubled=k2)
    if k2 > 1.5 * k and k2 > 0:
        report.unbounded_suspicion = True
        report.flags.append("unbounded suspicion")
    return report


def check_novikov_boundedness(spec: GameSpec, cloud, cond_limit: float = 1e12) -> DiagnosticsReport:
    """Sampled sup |sigma^+ f1| with the right pseudo-inverse, and min eig(sigma sigma^T)."""
    c = _as_cloud(cloud)
    if len(c) == 0:
        raise ValueError("empty sample cloud")
    sig = _per_sample_sigma(spec, c)  # (N, d, m)
    f1 = _per_sample_vector(spec.f1, spec, c)  # (N, d)
    a = sig @ np.swapaxes(sig, -1, -2)  # (N, d, d)
    eig = np.linalg.eigvalsh(a)
    c_hat = float(max(eig[:, 0].min(), 0.0))
    top = eig[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(eig[:, 0] > 0, top / eig[:, 0], np.inf)
    singular = ~(cond <= cond_limit)
    bound = 0.0
    f_norm = np.linalg.norm(f1, axis=1)
    if np.any(singular & (f_norm > 0)):
        bound = np.inf
    regular = ~singular
    if np.any(regular):
        a_r = a[regular]
        z = np.linalg.solve(a_r, f1[regular][..., None])  # (sigma sigma^T)^-1 f1
        kern = np.swapaxes(sig[regular], -1, -2) @ z  # sigma^T (sigma sigma^T)^-1 f1
        bound = max(bound, float(np.max(np.linalg.norm(kern[..., 0], axis=1))))
    report = DiagnosticsReport(n_samples=len(c), nondegeneracy=c_hat, novikov_bound=float(bound))
    if np.any(singular):
        report.degenerate = True
        report.flags.append("degenerate")
    return report
