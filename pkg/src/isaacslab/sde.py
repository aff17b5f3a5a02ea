"""Feedback policies and Euler-Maruyama simulation of the closed-loop state.

Every path draws its Brownian increments from its own generator, seeded by
``splitmix64(base_seed, path index)``.  A path is therefore fully determined
by ``(base_seed, index)``, independent of how paths are split between
workers, and two simulations with the same seed see the same noise (common
random numbers) whatever policies they use.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .expr import Expr
from .hamiltonian import hamiltonian_for
from .model import ControlSet, GameSpec
from .solver import ValueField

logger = logging.getLogger(__name__)

__all__ = [
    "FeedbackPolicy",
    "ConstantPolicy",
    "ExpressionPolicy",
    "TabulatedPolicy",
    "SaddlePolicy",
    "star_policies",
    "PathBundle",
    "SimulationError",
    "splitmix64",
    "path_seed",
    "brownian_increments",
    "simulate",
    "estimate_moments",
    "CLAMP_WARN_FRACTION",
]

CLAMP_WARN_FRACTION = 0.01
_MASK64 = (1 << 64) - 1


class SimulationError(RuntimeError):
    pass


# ------------------------------------------------------------------ seeding


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def path_seed(base_seed: int, index: int) -> int:
    return splitmix64(splitmix64(int(base_seed) & _MASK64) ^ int(index))


@lru_cache(maxsize=4)
def _increments(base_seed: int, n_paths: int, n_steps: int, m: int, dt: float) -> np.ndarray:
    out = np.empty((n_paths, n_steps, m))
    scale = np.sqrt(dt)
    for i in range(n_paths):
        rng = np.random.Generator(np.random.PCG64(path_seed(base_seed, i)))
        out[i] = rng.standard_normal((n_steps, m)) * scale
    out.setflags(write=False)
    return out


def brownian_increments(base_seed: int, n_paths: int, n_steps: int, m: int, dt: float) -> np.ndarray:
    """Increments of shape ``(n_paths, n_steps, m)``, each N(0, dt)."""
    return _increments(int(base_seed), int(n_paths), int(n_steps), int(m), float(dt))


# ----------------------------------------------------------------- policies


class FeedbackPolicy:
    """A map ``(s, x) -> u`` into a control set, evaluated on batches of states."""

    kind = "abstract"

    def __init__(self, control_set: ControlSet, label: str | None = None):
        self.control_set = control_set
        self.label = label or self.kind

    def __call__(self, s: float, X: np.ndarray) -> np.ndarray:
        return self.control_set.clamp(self._evaluate(s, np.atleast_2d(X)))

    def _evaluate(self, s, X):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.label!r})"


class ConstantPolicy(FeedbackPolicy):
    kind = "constant"

    def __init__(self, control_set: ControlSet, value, label: str | None = None):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if value.shape != (control_set.k,):
            raise ValueError(f"constant control must have {control_set.k} components")
        self.value = control_set.clamp(value)
        super().__init__(control_set, label or "const(" + ",".join(f"{v:g}" for v in self.value) + ")")

    def _evaluate(self, s, X):
        return np.broadcast_to(self.value, (X.shape[0], self.value.size))


class ExpressionPolicy(FeedbackPolicy):
    """Components given as expressions in ``s, x1..xd``."""

    kind = "expression"

    def __init__(self, control_set: ControlSet, exprs, label: str | None = None):
        if isinstance(exprs, (str, Expr)):
            exprs = [exprs]
        self.exprs = [e if isinstance(e, Expr) else Expr(e) for e in exprs]
        if len(self.exprs) != control_set.k:
            raise ValueError(f"need {control_set.k} expressions")
        for e in self.exprs:
            bad = {v for v in e.free_vars if v != "s" and not v.startswith("x")}
            if bad:
                raise ValueError(f"policy expressions may only use s and x_i, found {sorted(bad)}")
        super().__init__(control_set, label or "expr(" + ",".join(e.source for e in self.exprs) + ")")

    def _evaluate(self, s, X):
        env = {"s": s}
        for i in range(X.shape[1]):
            env[f"x{i + 1}"] = X[:, i]
        return np.stack([np.broadcast_to(np.asarray(e(env), dtype=float), X.shape[:1]) for e in self.exprs], axis=-1)


class TabulatedPolicy(FeedbackPolicy):
    """Control values on a space-time grid, looked up at the nearest node."""

    kind = "tabulated"

    def __init__(self, control_set: ControlSet, times, axes, values, label: str | None = None):
        self.times = np.asarray(times, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.values = np.asarray(values, dtype=float)
        expected = (self.times.size, *(a.size for a in self.axes), control_set.k)
        if self.values.shape != expected:
            raise ValueError(f"values must have shape {expected}, got {self.values.shape}")
        super().__init__(control_set, label)

    @staticmethod
    def _nearest(grid, q):
        i = np.clip(np.searchsorted(grid, q), 1, grid.size - 1)
        return np.where(np.abs(q - grid[i - 1]) <= np.abs(grid[i] - q), i - 1, i)

    def _evaluate(self, s, X):
        n = int(self._nearest(self.times, np.array([s]))[0])
        idx = tuple(self._nearest(ax, X[:, i]) for i, ax in enumerate(self.axes))
        return self.values[(n, *idx)]


class SaddlePolicy(FeedbackPolicy):
    """Synthesised feedback ``z*_i(s, x) = u*_i(s, x, Dv(s, x))``.

    The gradient is interpolated multilinearly in space from ``field`` and
    held constant over each solver time step.
    """

    kind = "synthesized"

    def __init__(self, spec: GameSpec, field: ValueField, player: int, label: str | None = None):
        if player not in (1, 2):
            raise ValueError("player must be 1 or 2")
        self.spec = spec
        self.field = field
        self.player = player
        self.engine = hamiltonian_for(spec)
        cs = spec.U1 if player == 1 else spec.U2
        super().__init__(cs, label or f"z{player}*")

    def _evaluate(self, s, X):
        P, _ = self.field.grad_at(s, X)
        idx = self.engine.select_one(self.player, s, X, P)
        return self.control_set.points[idx]

    def outside(self, X) -> np.ndarray:
        return self.field._locate(X)[2]


def star_policies(spec: GameSpec, field: ValueField):
    return SaddlePolicy(spec, field, 1), SaddlePolicy(spec, field, 2)


# ------------------------------------------------------------------ bundles


@dataclass
class PathBundle:
    """Euler-Maruyama paths with their noise, controls and running costs."""

    t: float
    x0: np.ndarray
    n_paths: int
    n_steps: int
    dt: float
    base_seed: int
    dW: np.ndarray  # (n_paths, n_steps, m)
    y: np.ndarray  # (n_paths, n_steps + 1, d)
    u1: np.ndarray  # (n_paths, n_steps, k1)
    u2: np.ndarray  # (n_paths, n_steps, k2)
    running: np.ndarray  # (n_paths,)
    failed: bool = False
    failed_paths: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    clamped_fraction: float = 0.0
    labels: tuple = ("", "")

    @property
    def times(self) -> np.ndarray:
        return self.t + self.dt * np.arange(self.n_steps + 1)

    @property
    def failed_path(self) -> int | None:
        return int(self.failed_paths[0]) if self.failed_paths.size else None


def _simulate_chunk(spec, policy1, policy2, t, dt, x0, dW):
    n, n_steps, _ = dW.shape
    d = spec.d
    y = np.empty((n, n_steps + 1, d))
    y[:, 0] = x0
    u1 = np.empty((n, n_steps, spec.U1.k))
    u2 = np.empty((n, n_steps, spec.U2.k))
    running = np.zeros(n)
    clamped = 0
    watch = [p for p in (policy1, policy2) if isinstance(p, SaddlePolicy)]
    with np.errstate(all="ignore"):
        for k in range(n_steps):
            s = t + k * dt
            Y = y[:, k]
            a1 = policy1(s, Y)
            a2 = policy2(s, Y)
            if watch:
                clamped += int(np.count_nonzero(watch[0].outside(Y)))
            u1[:, k] = a1
            u2[:, k] = a2
            drift = spec.drift(s, Y, a1, a2)
            sig = spec.diffusion(s, Y)
            noise = np.sum(sig * dW[:, k][:, None, :], axis=-1)
            y[:, k + 1] = Y + drift * dt + noise
            running += spec.running_cost(s, Y, a1, a2) * dt
    return y, u1, u2, running, clamped


def simulate(
    spec: GameSpec,
    policy1: FeedbackPolicy,
    policy2: FeedbackPolicy,
    t: float,
    x0,
    n_paths: int,
    n_steps: int,
    base_seed: int,
    workers: int = 1,
) -> PathBundle:
    """Euler-Maruyama paths of the closed-loop state on ``[t, T]``.

    Controls and running cost are evaluated at the left end of each step.
    Paths are split into ``workers`` contiguous blocks; the result does not
    depend on ``workers``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not (0.0 <= t < spec.T):
        raise ValueError(f"initial time {t} must lie in [0, T)")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (spec.d,):
        raise ValueError(f"x0 must have {spec.d} components")
    dt = (spec.T - t) / n_steps
    dW = brownian_increments(base_seed, n_paths, n_steps, spec.m, dt)
    workers = max(1, int(workers))
    bounds = np.linspace(0, n_paths, min(workers, n_paths) + 1).astype(int)
    blocks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    def run(sl):
        return _simulate_chunk(spec, policy1, policy2, t, dt, x0, dW[sl])

    if len(blocks) == 1:
        results = [run(blocks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
            results = list(pool.map(run, blocks))
    y = np.concatenate([r[0] for r in results])
    u1 = np.concatenate([r[1] for r in results])
    u2 = np.concatenate([r[2] for r in results])
    running = np.concatenate([r[3] for r in results])
    clamped = sum(r[4] for r in results)
    bad = ~(np.all(np.isfinite(y.reshape(n_paths, -1)), axis=1) & np.isfinite(running))
    failed_paths = np.flatnonzero(bad)
    frac = clamped / float(n_paths * n_steps)
    if frac > CLAMP_WARN_FRACTION:
        logger.warning("%.2f%% of policy evaluations left the grid box; enlarge the box", 100 * frac)
    return PathBundle(
        t=float(t),
        x0=x0,
        n_paths=int(n_paths),
        n_steps=int(n_steps),
        dt=dt,
        base_seed=int(base_seed),
        dW=dW,
        y=y,
        u1=u1,
        u2=u2,
        running=running,
        failed=bool(failed_paths.size),
        failed_paths=failed_paths,
        clamped_fraction=frac,
        labels=(policy1.label, policy2.label),
    )


def estimate_moments(bundle: PathBundle, p: int = 2):
    """Monte-Carlo estimate of ``E sup_s |y(s)|^p`` and its standard error."""
    if bundle.failed:
        raise SimulationError(f"bundle failed at path {bundle.failed_path}")
    if int(p) != p or p <= 0 or p % 2:
        raise ValueError("p must be a positive even integer")
    sup = np.max(np.sum(bundle.y**2, axis=-1) ** (p // 2), axis=1)
    return _mean_se(sup)


def _mean_se(values):
    """Mean and standard error, exact for constant samples."""
    values = np.asarray(values, dtype=float)
    ref = values[0]
    dev = values - ref
    mean = ref + dev.mean()
    n = values.size
    se = float(np.sqrt(np.sum((dev - dev.mean()) ** 2) / (n - 1) / n)) if n > 1 else 0.0
    return float(mean), se
