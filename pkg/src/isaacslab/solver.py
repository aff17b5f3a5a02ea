"""Explicit finite-difference solver for the Bellman-Isaacs and HJB equations.

The backward equation

    v_s + <b, Dv> + 1/2 Tr(sigma^T D^2 v sigma) + H0(s, x, Dv) = 0,   v(T) = g

is marched from ``T`` to ``0`` with explicit Euler steps on a uniform grid
in one or two space dimensions.  First-order terms use central differences;
when the sampled non-degeneracy constant of ``sigma sigma^T`` is below
``LF_THRESHOLD`` a local Lax-Friedrichs viscosity is added.  Ghost nodes are
filled by linear extrapolation (zero second derivative at the boundary).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import Hamiltonian, hamiltonian_for
from .model import GameSpec

logger = logging.getLogger(__name__)

__all__ = [
    "Grid",
    "ValueField",
    "ResidualStats",
    "SolverError",
    "StabilityError",
    "LF_THRESHOLD",
    "solve_bi",
    "solve_hjb_control",
    "gradient",
    "residual",
    "stability_limit",
]

LF_THRESHOLD = 0.05
CFL_SAFETY = 0.9


class SolverError(RuntimeError):
    pass


class StabilityError(SolverError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid: ``n[i]`` nodes on ``[lo[i], hi[i]]`` and ``nt`` time levels on [0, T]."""

    lo: tuple
    hi: tuple
    n: tuple
    nt: int
    T: float

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(lo) == len(hi) == len(n)):
            raise ValueError("lo, hi and n must have the same length")
        if len(n) > 2:
            raise ValueError("the grid solver supports d <= 2")
        if any(k < 3 for k in n):
            raise ValueError("need at least 3 nodes per dimension")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("grid box must have hi > lo")
        if int(self.nt) < 2:
            raise ValueError("need at least 2 time levels")
        if not self.T > 0:
            raise ValueError("T must be positive")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "nt", int(self.nt))
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def for_spec(cls, spec: GameSpec, lo, hi, n, nt) -> "Grid":
        n = np.broadcast_to(np.atleast_1d(n), (spec.d,))
        return cls(tuple(np.atleast_1d(lo)), tuple(np.atleast_1d(hi)), tuple(n), nt, spec.T)

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.n) - 1)

    @property
    def dt(self) -> float:
        return self.T / (self.nt - 1)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt)

    @property
    def axes(self) -> list:
        return [np.linspace(a, b, k) for a, b, k in zip(self.lo, self.hi, self.n)]

    @property
    def shape(self) -> tuple:
        return self.n

    def nodes(self) -> np.ndarray:
        """All spatial nodes, shape (prod(n), d), C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def inner_mask(self, frac: float = 0.6, margin: int = 0) -> np.ndarray:
        """Nodes inside the central ``frac`` of the box, at least ``margin`` nodes from the edge."""
        masks = []
        for ax, a, b, k in zip(self.axes, self.lo, self.hi, self.n):
            cut = 0.5 * (1.0 - frac) * (b - a)
            m = (ax >= a + cut - 1e-12) & (ax <= b - cut + 1e-12)
            idx = np.arange(k)
            m &= (idx >= margin) & (idx <= k - 1 - margin)
            masks.append(m)
        if len(masks) == 1:
            return masks[0]
        return masks[0][:, None] & masks[1][None, :]


@dataclass
class ValueField:
    """Grid solution ``v`` (time-major) with its spatial gradient."""

    grid: Grid
    v: np.ndarray
    equation: str
    side: str
    scheme: dict = field(default_factory=dict)
    grad: np.ndarray | None = None

    def time_index(self, s) -> np.ndarray | int:
        """Time level used for gradient look-ups: piecewise constant on [t_n, t_{n+1})."""
        n = np.floor(np.asarray(s, dtype=float) / self.grid.dt + 1e-9).astype(int)
        return np.clip(n, 0, self.grid.nt - 2)

    def _locate(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo = np.array(self.grid.lo)
        hi = np.array(self.grid.hi)
        outside = np.any((X < lo) | (X > hi), axis=1)
        r = (np.clip(X, lo, hi) - lo) / self.grid.h
        n = np.array(self.grid.n)
        i = np.minimum(np.floor(r).astype(int), n - 2)
        w = r - i
        return i, w, outside

    def _interp(self, A, X):
        """Multilinear interpolation of a spatial array ``A`` (shape n or n + (k,))."""
        i, w, outside = self._locate(X)
        if self.grid.d == 1:
            i0, w0 = i[:, 0], w[:, 0]
            if A.ndim == 2:
                w0 = w0[:, None]
            return (1.0 - w0) * A[i0] + w0 * A[i0 + 1], outside
        i0, i1 = i[:, 0], i[:, 1]
        w0, w1 = w[:, 0], w[:, 1]
        if A.ndim == 3:
            w0, w1 = w0[:, None], w1[:, None]
        out = (
            (1.0 - w0) * (1.0 - w1) * A[i0, i1]
            + w0 * (1.0 - w1) * A[i0 + 1, i1]
            + (1.0 - w0) * w1 * A[i0, i1 + 1]
            + w0 * w1 * A[i0 + 1, i1 + 1]
        )
        return out, outside

    def grad_at(self, s: float, X):
        """Interpolated gradient at time ``s`` for states ``X`` (N, d).

        Returns ``(P, outside)``; states outside the box use the clamped
        (nearest boundary) value and are marked in ``outside``.
        """
        if self.grad is None:
            raise ValueError("gradient not populated; call gradient(field) first")
        n = int(self.time_index(s))
        return self._interp(self.grad[n], X)

    def value_at(self, t: float, X) -> np.ndarray:
        """Value at the time level nearest ``t``, interpolated in space."""
        n = int(np.clip(np.rint(t / self.grid.dt), 0, self.grid.nt - 1))
        return self._interp(self.v[n], X)[0]


# ------------------------------------------------------------- stencils


def _pad(V, w):
    # odd reflection about the edge node is linear extrapolation
    return np.pad(V, w, mode="reflect", reflect_type="odd")


def _shift(W, w, offsets):
    return W[tuple(slice(w + o, W.shape[a] - w + o) for a, o in enumerate(offsets))]


def _first(W, w, axis, h, order):
    d = W.ndim

    def at(k):
        off = [0] * d
        off[axis] = k
        return _shift(W, w, off)

    if order == 2:
        return (at(1) - at(-1)) / (2.0 * h)
    return (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * h)


def _second(W, w, axis, h, order):
    d = W.ndim

    def at(k):
        off = [0] * d
        off[axis] = k
        return _shift(W, w, off)

    if order == 2:
        return (at(1) - 2.0 * at(0) + at(-1)) / (h * h)
    return (-at(2) + 16.0 * at(1) - 30.0 * at(0) + 16.0 * at(-1) - at(-2)) / (12.0 * h * h)


def _mixed(W, w, h, order):
    """d^2/dx1 dx2 as the tensor product of first-difference stencils."""
    if order == 2:
        taps = [(1, 0.5), (-1, -0.5)]
    else:
        taps = [(2, -1.0 / 12.0), (1, 8.0 / 12.0), (-1, -8.0 / 12.0), (-2, 1.0 / 12.0)]
    out = 0.0
    for k0, c0 in taps:
        for k1, c1 in taps:
            out = out + c0 * c1 * _shift(W, w, (k0, k1))
    return out / (h[0] * h[1])


def _one_sided(W, w, axis, h):
    d = W.ndim

    def at(k):
        off = [0] * d
        off[axis] = k
        return _shift(W, w, off)

    return (at(0) - at(-1)) / h, (at(1) - at(0)) / h


# ----------------------------------------------------------- coefficients


@dataclass
class _Coefficients:
    """b and a = sigma sigma^T at grid nodes, cached when time-independent."""

    spec: GameSpec
    X: np.ndarray
    shape: tuple
    _cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.static = not self.spec.depends_on((*self.spec.b, *self.spec.sigma_exprs), {"s"})

    def at(self, s):
        key = 0.0 if self.static else float(s)
        hit = self._cache.get(key)
        if hit is None:
            b = self.spec.drift_b(s, self.X)
            sig = self.spec.diffusion(s, self.X)
            a = sig @ np.swapaxes(sig, -1, -2)
            hit = (b, a)
            if self.static:
                self._cache[key] = hit
        return hit


def _sample_levels(grid: Grid, time_dependent: bool, count: int = 21) -> np.ndarray:
    if not time_dependent:
        return np.array([grid.T])
    # every level would be exact but costly; regime switches are caught by dense sampling
    levels = np.unique(np.linspace(0, grid.nt - 1, min(grid.nt, 4 * count)).astype(int))
    return grid.times[levels]


def stability_limit(spec: GameSpec, grid: Grid) -> dict:
    """Sampled CFL quantities and the admissible time step.

    ``dt_max = 0.9 / (sum_i max|a|/h_i^2 + sum_i max(|b_i| + |f1_i|)/h_i)``
    with ``a = sigma sigma^T`` and the maxima taken over grid nodes, sampled
    time levels and all grid controls.
    """
    engine = hamiltonian_for(spec)
    X = grid.nodes()
    time_dep = spec.depends_on((*spec.b, *spec.sigma_exprs, *spec.f1), {"s"})
    a_max = 0.0
    c_min = np.inf
    drift = np.zeros(spec.d)
    for s in _sample_levels(grid, time_dep):
        sig = spec.diffusion(s, X)
        a = sig @ np.swapaxes(sig, -1, -2)
        a_max = max(a_max, float(np.max(np.abs(a))))
        c_min = min(c_min, float(np.linalg.eigvalsh(a)[:, 0].min()))
        b = np.abs(spec.drift_b(s, X)).max(axis=0)
        f = np.zeros(spec.d)
        step = max(1, (1 << 20) // (engine.U1.shape[0] * engine.U2.shape[0]))
        for start in range(0, X.shape[0], step):
            F, _ = engine._tables(s, X[start : start + step])
            f = np.maximum(f, np.abs(F).reshape(-1, spec.d).max(axis=0))
        drift = np.maximum(drift, b + f)
    h = grid.h
    denom = np.sum(a_max / h**2) + np.sum(drift / h)
    dt_max = np.inf if denom == 0 else CFL_SAFETY / denom
    return {"dt_max": float(dt_max), "a_max": a_max, "c_hat": max(c_min, 0.0), "drift_max": drift.tolist()}


# ---------------------------------------------------------------- operator


def _operator(spec, engine: Hamiltonian, side, coeffs: _Coefficients, s, V, h, order, lf=False):
    """Spatial part ``<b,Dv> + 1/2 Tr(a D^2 v) + H0(Dv)`` (+ LLF viscosity)."""
    d = spec.d
    w = 1 if order == 2 else 2
    W = _pad(V, w)
    b, a = coeffs.at(s)
    shape = V.shape
    grads = [_first(W, w, i, h[i], order) for i in range(d)]
    P = np.stack([g.ravel() for g in grads], axis=-1)
    out = engine.value(side, s, coeffs.X, P).reshape(shape)
    for i in range(d):
        out = out + b[:, i].reshape(shape) * grads[i]
        out = out + 0.5 * a[:, i, i].reshape(shape) * _second(W, w, i, h[i], order)
    if d == 2:
        out = out + a[:, 0, 1].reshape(shape) * _mixed(W, w, h, order)
    if lf:
        out = out + _llf_viscosity(spec, engine, side, coeffs, s, W, w, h, b)
    return out


def _llf_viscosity(spec, engine, side, coeffs, s, W, w, h, b):
    """Local Lax-Friedrichs term ``sum_i theta_i h_i (second difference)_i``.

    ``theta_i`` is half the largest characteristic speed
    ``|b_i + f1_i(u*(p))|`` over the backward and forward one-sided gradients.
    """
    shape = W[(slice(w, -w),) * W.ndim].shape
    sides = [_one_sided(W, w, i, h[i]) for i in range(spec.d)]
    speed = np.zeros((int(np.prod(shape)), spec.d))
    for k in range(2):
        P = np.stack([sides[i][k].ravel() for i in range(spec.d)], axis=-1)
        i1, i2 = engine.select(s, coeffs.X, P)
        f = spec.drift_f1(s, coeffs.X, engine.U1[i1], engine.U2[i2])
        speed = np.maximum(speed, np.abs(b + f))
    out = 0.0
    for i in range(spec.d):
        theta = 0.5 * speed[:, i].reshape(shape)
        out = out + theta * h[i] * _second(W, w, i, h[i], 2)
    return out


# ------------------------------------------------------------------ solves


def solve_bi(spec: GameSpec, grid: Grid, side: str = "upper", lax_friedrichs: bool | None = None) -> ValueField:
    """Solve the upper (``side="upper"``) or lower Bellman-Isaacs equation.

    Parameters
    ----------
    lax_friedrichs
        Force the viscosity term on or off; by default it is enabled when the
        sampled non-degeneracy constant is below ``LF_THRESHOLD``.

    Raises
    ------
    StabilityError
        If the grid time step exceeds the sampled CFL bound.
    SolverError
        If a non-finite value appears during the sweep.
    """
    if side not in ("upper", "lower"):
        raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")
    if spec.d > 2:
        raise ValueError("the grid solver supports d <= 2")
    if grid.d != spec.d:
        raise ValueError(f"grid dimension {grid.d} does not match d={spec.d}")
    if abs(grid.T - spec.T) > 1e-12:
        raise ValueError("grid horizon differs from the model horizon")
    stab = stability_limit(spec, grid)
    if grid.dt > stab["dt_max"]:
        need = int(np.ceil(grid.T / stab["dt_max"])) + 1
        raise StabilityError(
            f"dt={grid.dt:.3g} exceeds the stability bound {stab['dt_max']:.3g}; use nt >= {need}"
        )
    lf = stab["c_hat"] < LF_THRESHOLD if lax_friedrichs is None else bool(lax_friedrichs)
    engine = hamiltonian_for(spec)
    X = grid.nodes()
    coeffs = _Coefficients(spec, X, grid.shape)
    h = grid.h
    times = grid.times
    dt = grid.dt
    v = np.empty((grid.nt, *grid.shape))
    v[-1] = spec.terminal_cost(X).reshape(grid.shape)
    if not np.all(np.isfinite(v[-1])):
        raise SolverError("terminal cost is not finite on the grid")
    for n in range(grid.nt - 2, -1, -1):
        v[n] = v[n + 1] + dt * _operator(spec, engine, side, coeffs, times[n + 1], v[n + 1], h, 2, lf)
        if not np.all(np.isfinite(v[n])):
            raise SolverError(f"non-finite value at time level {n} (t={times[n]:.6g})")
    equation = "HJB-control" if spec.is_control else f"BI-{side}"
    scheme = {"dt": dt, "h": h.tolist(), "lax_friedrichs": lf, **stab}
    logger.info("solved %s on %s x %d grid (lf=%s)", equation, grid.n, grid.nt, lf)
    return gradient(ValueField(grid=grid, v=v, equation=equation, side=side, scheme=scheme))


def solve_hjb_control(spec: GameSpec, grid: Grid, lax_friedrichs: bool | None = None) -> ValueField:
    """Solve the HJB equation of a control problem (``inf`` over the single control set)."""
    if not spec.is_control:
        raise ValueError("solve_hjb_control needs a control problem (model.kind = 'control')")
    # with a singleton maximiser both sides equal the infimum over U
    return solve_bi(spec, grid, "upper", lax_friedrichs)


def gradient(field: ValueField) -> ValueField:
    """Populate ``field.grad``: central differences inside, second-order one-sided at the edges.

    The last level (t = T) reuses the gradient of the level before it, since
    the terminal datum need not be differentiable.
    """
    grid = field.grid
    axes = tuple(range(1, grid.d + 1))
    if grid.d == 1:
        parts = [np.gradient(field.v, grid.h[0], axis=1, edge_order=2)]
    else:
        parts = np.gradient(field.v, *grid.h, axis=axes, edge_order=2)
    grad = np.stack(parts, axis=-1)
    if grid.nt >= 2:
        grad[-1] = grad[-2]
    field.grad = grad
    return field


@dataclass
class ResidualStats:
    max: float
    l2: float
    n: int
    values: np.ndarray = field(repr=False, default=None)

    @property
    def max_norm(self) -> float:
        return self.max


def residual(spec: GameSpec, field: ValueField, side: str | None = None, sample=None, frac: float = 0.6) -> ResidualStats:
    """Discrete residual of the PDE at interior nodes.

    ``r = (v^{n+1} - v^n)/dt + <b,Dv^n> + 1/2 Tr(a D^2 v^n) + H0(Dv^n)`` with
    fourth-order spatial stencils, so that both the time and the space
    truncation of the scheme show up (r = O(h^2 + dt) on smooth solutions).
    Coefficients are taken at ``t_{n+1}`` like in the scheme, so a jump of
    the coefficients in time does not register as a residual.

    ``sample`` is an optional boolean mask of shape ``(nt - 1, *n)``; by
    default all levels ``0 .. nt-2`` and nodes in the central ``frac`` of the
    box (two nodes away from the edge) are used.
    """
    side = side or field.side
    grid = field.grid
    engine = hamiltonian_for(spec)
    X = grid.nodes()
    coeffs = _Coefficients(spec, X, grid.shape)
    lf = bool(field.scheme.get("lax_friedrichs", False))
    h = grid.h
    if sample is None:
        inner = grid.inner_mask(frac, margin=2)
        sample = np.broadcast_to(inner, (grid.nt - 1, *grid.shape))
    r = np.full((grid.nt - 1, *grid.shape), np.nan)
    times = grid.times
    for n in range(grid.nt - 1):
        if not np.any(sample[n]):
            continue
        A = _operator(spec, engine, side, coeffs, times[n + 1], field.v[n], h, 4, lf)
        rn = (field.v[n + 1] - field.v[n]) / grid.dt + A
        r[n][sample[n]] = rn[sample[n]]
    vals = r[sample]
    return ResidualStats(
        max=float(np.max(np.abs(vals))) if vals.size else 0.0,
        l2=float(np.sqrt(np.mean(vals**2))) if vals.size else 0.0,
        n=int(vals.size),
        values=r,
    )
