"""Current-value Hamiltonian, upper/lower Hamiltonians and saddle selection.

Control sets are finite, so every sup/inf is an exhaustive max/min over the
enumeration of ``ControlSet.points``.  Ties are broken by the first index in
that enumeration, which gives a deterministic, piecewise-constant (hence
Borel) selection.

For a payoff table ``M`` of shape ``(n1, n2)`` (rows: player-1 controls,
columns: player-2 controls)::

    lower = max_i min_j M[i, j]     (player 1 moves first)
    upper = min_j max_i M[i, j]
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass

import numpy as np

from .model import GameSpec

logger = logging.getLogger(__name__)

__all__ = [
    "HamiltonianReport",
    "Hamiltonian",
    "hamiltonian_for",
    "matrix_lower",
    "matrix_upper",
    "matrix_gap",
    "matrix_select",
    "matrix_saddle_violation",
    "h0_cv",
    "h_lower",
    "h_upper",
    "hamiltonian_report",
    "isaacs_gap",
    "select_saddle",
    "check_saddle_inequalities",
]

SADDLE_TOL = 1e-10

# elements per brute-force chunk (N * n1 * n2)
_CHUNK = 1 << 21


# ------------------------------------------------------------------ tables


def matrix_lower(M):
    """``max_i min_j M`` over the last two axes; returns (value, row index)."""
    inner = M.min(axis=-1)
    i = inner.argmax(axis=-1)
    return np.take_along_axis(inner, i[..., None], -1)[..., 0], i


def matrix_upper(M):
    """``min_j max_i M`` over the last two axes; returns (value, column index)."""
    inner = M.max(axis=-2)
    j = inner.argmin(axis=-1)
    return np.take_along_axis(inner, j[..., None], -1)[..., 0], j


def matrix_gap(M):
    return matrix_upper(M)[0] - matrix_lower(M)[0]


def matrix_select(M):
    """Row maximising the row minimum and column minimising the column maximum."""
    return matrix_lower(M)[1], matrix_upper(M)[1]


def matrix_saddle_violation(M, i, j) -> float:
    """Largest violation of ``M[:, j] <= M[i, j] <= M[i, :]`` (0 when it is a saddle)."""
    M = np.asarray(M)
    centre = M[i, j]
    return float(max(M[:, j].max() - centre, centre - M[i, :].min(), 0.0))


# ------------------------------------------------------------- spec engine


class _AffineSelector:
    """Exact lookup of lower/upper selections for ``H = p * F + L`` with scalar p.

    Between two consecutive crossing points of the lines ``p -> F_ij p + L_ij``
    the ordering of all table entries is fixed, so the selections (including
    first-index tie-breaks) are constant there.  They are computed once at
    interval midpoints; queries close to a crossing point fall back to direct
    enumeration so results always agree with brute force.
    """

    GUARD = 1e-9
    P_MAX = 1e6

    def __init__(self, F, L):
        self.F = F
        self.L = L
        n1, n2 = F.shape
        lines = np.stack([F.ravel(), L.ravel()], axis=1)
        uniq = np.unique(lines, axis=0)
        fu, lu = uniq[:, 0], uniq[:, 1]
        a, b = np.triu_indices(fu.size, k=1)
        df = fu[a] - fu[b]
        crossing = df != 0
        with np.errstate(divide="ignore", invalid="ignore"):
            c = (lu[b] - lu[a])[crossing] / df[crossing]
        c = np.unique(c[np.isfinite(c) & (np.abs(c) < self.P_MAX)])
        self.breaks = c
        if c.size:
            mids = np.concatenate([[c[0] - 1.0], 0.5 * (c[:-1] + c[1:]), [c[-1] + 1.0]])
        else:
            mids = np.array([0.0])
        # (i_low, j_low) realises the lower value, (i_up, j_up) the upper one
        parts = {"i_low": [], "j_low": [], "i_up": [], "j_up": []}
        step = max(1, _CHUNK // (n1 * n2))
        for start in range(0, mids.size, step):
            p = mids[start : start + step]
            r = np.arange(p.size)
            M = p[:, None, None] * F[None] + L[None]
            rows = M.min(axis=-1).argmax(axis=-1)
            cols = M.max(axis=-2).argmin(axis=-1)
            parts["i_low"].append(rows)
            parts["j_low"].append(M[r, rows].argmin(axis=-1))
            parts["j_up"].append(cols)
            parts["i_up"].append(M[r, :, cols].argmax(axis=-1))
        sel = np.stack([np.concatenate(parts[key]) for key in parts], axis=1)
        # drop crossings where no selected index changes
        changed = np.flatnonzero(np.any(sel[1:] != sel[:-1], axis=1))
        self.breaks = c[changed]
        sel = sel[np.concatenate([[0], changed + 1])]
        for col, key in enumerate(parts):
            setattr(self, key, sel[:, col].copy())

    @staticmethod
    def usable(F, L) -> bool:
        n = F.size
        if n > 1500:
            return False
        lines = np.stack([F.ravel(), L.ravel()], axis=1)
        uniq = np.unique(lines, axis=0)
        # near-identical parallel lines can tie after rounding; keep brute force there
        same_f = np.diff(uniq[:, 0]) == 0
        if np.any(same_f & (np.diff(uniq[:, 1]) < 1e-9)):
            return False
        return True

    def lookup(self, p):
        """Return (interval index, mask of queries needing brute force)."""
        k = np.searchsorted(self.breaks, p)
        near = ~np.isfinite(p) | (np.abs(p) >= self.P_MAX)
        if self.breaks.size:
            lo = self.breaks[np.clip(k - 1, 0, self.breaks.size - 1)]
            hi = self.breaks[np.clip(k, 0, self.breaks.size - 1)]
            scale = self.GUARD * np.maximum(1.0, np.abs(p))
            near |= (np.abs(p - lo) <= scale) | (np.abs(p - hi) <= scale)
        return k, near


class Hamiltonian:
    """Vectorised Hamiltonian evaluation for one :class:`GameSpec`.

    All batch methods take ``s`` (scalar time), ``X`` of shape ``(N, d)``
    and ``P`` of shape ``(N, d)``.
    """

    def __init__(self, spec: GameSpec):
        self.spec = spec
        self.U1 = spec.U1.points
        self.U2 = spec.U2.points
        names = {"s", *spec.state_names}
        coeffs = (*spec.f1, spec.l)
        self.depends_on_time = spec.depends_on(coeffs, {"s"})
        self.depends_on_state = spec.depends_on(coeffs, set(spec.state_names))
        self._static = None
        self._selector = None
        if not spec.depends_on(coeffs, names):
            F, L = self._tables(0.0, np.zeros((1, spec.d)))
            self._static = (F, L)
            if spec.d == 1 and _AffineSelector.usable(F[0, ..., 0], L[0]):
                self._selector = _AffineSelector(F[0, ..., 0], L[0])

    # -- tensors ----------------------------------------------------------

    def _tables(self, s, X):
        """f1 and l on the control grid: F (N, n1, n2, d) and L (N, n1, n2)."""
        spec = self.spec
        X = np.asarray(X, dtype=float)
        env = {"s": s}
        for i in range(spec.d):
            env[f"x{i + 1}"] = X[:, i][:, None, None]
        for j in range(spec.U1.k):
            env[f"u1_{j + 1}"] = self.U1[:, j][None, :, None]
        for j in range(spec.U2.k):
            env[f"u2_{j + 1}"] = self.U2[:, j][None, None, :]
        shape = (X.shape[0], self.U1.shape[0], self.U2.shape[0])
        F = np.stack([np.broadcast_to(np.asarray(e(env), dtype=float), shape) for e in spec.f1], axis=-1)
        L = np.broadcast_to(np.asarray(spec.l(env), dtype=float), shape)
        return F, L

    def tensor(self, s, X, P):
        """H0_CV on the full control grid, shape (N, n1, n2)."""
        P = np.asarray(P, dtype=float)
        if self._static is not None:
            F, L = self._static
        else:
            F, L = self._tables(s, X)
        if self.spec.d == 1:
            return P[:, 0][:, None, None] * F[..., 0] + L
        H = L
        for i in range(self.spec.d):
            H = H + P[:, i][:, None, None] * F[..., i]
        return H

    def _chunks(self, n):
        step = max(1, _CHUNK // (self.U1.shape[0] * self.U2.shape[0]))
        for start in range(0, n, step):
            yield slice(start, min(n, start + step))

    def _brute(self, s, X, P, want):
        n = P.shape[0]
        out = {k: np.empty(n, dtype=float if k.startswith("v") else np.intp) for k in want}
        for sl in self._chunks(n):
            M = self.tensor(s, X[sl], P[sl])
            if "v_low" in want or "i1" in want:
                v, i = matrix_lower(M)
                if "v_low" in want:
                    out["v_low"][sl] = v
                if "i1" in want:
                    out["i1"][sl] = i
            if "v_up" in want or "i2" in want:
                v, j = matrix_upper(M)
                if "v_up" in want:
                    out["v_up"][sl] = v
                if "i2" in want:
                    out["i2"][sl] = j
        return out

    def _evaluate(self, s, X, P, want):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if X.shape[0] != P.shape[0]:
            X = np.broadcast_to(X, P.shape)
        sel = self._selector
        if sel is None:
            return self._brute(s, X, P, want)
        p = P[:, 0]
        k, near = sel.lookup(p)
        F, L = sel.F, sel.L
        out = {}
        if "v_low" in want:
            out["v_low"] = p * F[sel.i_low[k], sel.j_low[k]] + L[sel.i_low[k], sel.j_low[k]]
        if "v_up" in want:
            out["v_up"] = p * F[sel.i_up[k], sel.j_up[k]] + L[sel.i_up[k], sel.j_up[k]]
        if "i1" in want:
            out["i1"] = sel.i_low[k].copy()
        if "i2" in want:
            out["i2"] = sel.j_up[k].copy()
        if np.any(near):
            idx = np.flatnonzero(near)
            fix = self._brute(s, X[idx], P[idx], want)
            for key in want:
                out[key][idx] = fix[key]
        return out

    # -- public batch API --------------------------------------------------

    def lower(self, s, X, P):
        out = self._evaluate(s, X, P, ("v_low", "i1"))
        return out["v_low"], out["i1"]

    def upper(self, s, X, P):
        out = self._evaluate(s, X, P, ("v_up", "i2"))
        return out["v_up"], out["i2"]

    def value(self, side: str, s, X, P):
        if side == "upper":
            return self._evaluate(s, X, P, ("v_up",))["v_up"]
        if side == "lower":
            return self._evaluate(s, X, P, ("v_low",))["v_low"]
        raise ValueError(f"side must be 'upper' or 'lower', got {side!r}")

    def select(self, s, X, P):
        """Indices (i1*, i2*) of the selected controls."""
        out = self._evaluate(s, X, P, ("i1", "i2"))
        return out["i1"], out["i2"]

    def select_one(self, player: int, s, X, P):
        key = "i1" if player == 1 else "i2"
        return self._evaluate(s, X, P, (key,))[key]

    def all(self, s, X, P):
        return self._evaluate(s, X, P, ("v_low", "i1", "v_up", "i2"))


_ENGINES: "weakref.WeakKeyDictionary[GameSpec, Hamiltonian]" = weakref.WeakKeyDictionary()


def hamiltonian_for(spec: GameSpec) -> Hamiltonian:
    """Shared :class:`Hamiltonian` for ``spec`` (built once per spec)."""
    engine = _ENGINES.get(spec)
    if engine is None:
        engine = Hamiltonian(spec)
        _ENGINES[spec] = engine
    return engine


# ------------------------------------------------------ pointwise operations


@dataclass
class HamiltonianReport:
    s: float
    x: np.ndarray
    p: np.ndarray
    H_lower: float
    H_upper: float
    gap: float
    argmax_u1: int
    argmin_u2: int


def _point(spec, x, p):
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, spec.d)
    p = np.atleast_1d(np.asarray(p, dtype=float)).reshape(1, spec.d)
    return x, p


def _table(spec: GameSpec, s, x, p):
    x, p = _point(spec, x, p)
    return hamiltonian_for(spec).tensor(s, x, p)[0]


def h0_cv(spec: GameSpec, s, x, p, u1, u2) -> float:
    """<f1(s,x,u1,u2), p> + l(s,x,u1,u2)."""
    x, p = _point(spec, x, p)
    u1 = np.atleast_1d(np.asarray(u1, dtype=float))[None, :]
    u2 = np.atleast_1d(np.asarray(u2, dtype=float))[None, :]
    f = spec.drift_f1(s, x, u1, u2)[0]
    return float(f @ p[0] + spec.running_cost(s, x, u1, u2)[0])


def h_lower(spec: GameSpec, s, x, p):
    """sup-inf Hamiltonian and the first maximising player-1 control."""
    v, i = matrix_lower(_table(spec, s, x, p))
    return float(v), spec.U1.points[int(i)].copy()


def h_upper(spec: GameSpec, s, x, p):
    """inf-sup Hamiltonian and the first minimising player-2 control."""
    v, j = matrix_upper(_table(spec, s, x, p))
    return float(v), spec.U2.points[int(j)].copy()


def hamiltonian_report(spec: GameSpec, s, x, p) -> HamiltonianReport:
    M = _table(spec, s, x, p)
    lo, i = matrix_lower(M)
    up, j = matrix_upper(M)
    return HamiltonianReport(
        s=float(s),
        x=np.atleast_1d(np.asarray(x, dtype=float)),
        p=np.atleast_1d(np.asarray(p, dtype=float)),
        H_lower=float(lo),
        H_upper=float(up),
        gap=float(up - lo),
        argmax_u1=int(i),
        argmin_u2=int(j),
    )


def isaacs_gap(spec: GameSpec, cloud) -> float:
    """Largest ``H_upper - H_lower`` over sample points ``(s, x, p)``.

    ``cloud`` is an iterable of ``(s, x, p)`` triples, or a tuple of arrays
    ``(s, X, P)`` with shapes (N,), (N, d), (N, d).
    """
    gaps = isaacs_gap_values(spec, cloud)
    if gaps.size == 0:
        raise ValueError("empty sample cloud")
    return float(gaps.max())


def isaacs_gap_values(spec: GameSpec, cloud) -> np.ndarray:
    if isinstance(cloud, tuple) and len(cloud) == 3 and isinstance(cloud[1], np.ndarray):
        S, X, P = cloud
        S = np.asarray(S, dtype=float)
    else:
        triples = list(cloud)
        if not triples:
            return np.empty(0)
        S = np.array([t[0] for t in triples], dtype=float)
        X = np.array([np.atleast_1d(t[1]) for t in triples], dtype=float)
        P = np.array([np.atleast_1d(t[2]) for t in triples], dtype=float)
    X = X.reshape(S.size, spec.d)
    P = P.reshape(S.size, spec.d)
    engine = hamiltonian_for(spec)
    out = np.empty(S.size)
    if engine.depends_on_time:
        for s in np.unique(S):
            idx = np.flatnonzero(S == s)
            r = engine.all(s, X[idx], P[idx])
            out[idx] = r["v_up"] - r["v_low"]
    else:
        r = engine.all(0.0, X, P)
        out[:] = r["v_up"] - r["v_low"]
    return out


def select_saddle(spec: GameSpec, s, x, p):
    """Saddle candidates ``(u1*, u2*)`` at one point.

    ``u2*`` is the first control minimising ``max_u1 H0_CV`` and ``u1*`` the
    first control maximising ``min_u2 H0_CV``.
    """
    i, j = matrix_select(_table(spec, s, x, p))
    return spec.U1.points[int(i)].copy(), spec.U2.points[int(j)].copy()


def check_saddle_inequalities(spec: GameSpec, s, x, p, u1_star, u2_star, tol: float = SADDLE_TOL):
    """Whether ``(u1*, u2*)`` is a saddle of H0_CV on the control grids.

    Returns ``(ok, worst_violation)``.
    """
    M = _table(spec, s, x, p)
    i = spec.U1.index_of(u1_star)
    j = spec.U2.index_of(u2_star)
    worst = matrix_saddle_violation(M, i, j)
    return worst <= tol, worst
