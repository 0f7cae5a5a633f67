"""Substituting conservative systems built on one damped phase curve.

Along a trajectory the damping force row  G_i = sum_l C_il q'_l  is restricted
to the curve.  Wherever q_i(t) is strictly monotone the restriction becomes a
function of q_i alone, which is a conservative force with potential

    V_i(q_i) = W_i(t_a) + int_{q_i(t_a)}^{q_i} G_i dq_i,

and the work  W(t) = sum_i int G_i dq_i  makes  H(t) + W(t)  constant on the
curve.  The per-segment tables are the dense-output polynomials themselves:
G_i(q_i) is evaluated by inverting the monotone interpolant q_i(t) and then
reading G_i at that time.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import _kernels
from .errors import ConfigurationError, ForceDomainError, OutOfRangeError
from .integrate import Trajectory, derivative_coefficients, polyval_steps
from .model import DampedSystem, energy_array


# --- per-step polynomial tables ------------------------------------------------


def _polymul_steps(a, b):
    """Product of per-step polynomials a (m, da, n) and b (m, db, n)."""
    out = np.zeros((a.shape[0], a.shape[1] + b.shape[1] - 1) + a.shape[2:])
    for i in range(a.shape[1]):
        for j in range(b.shape[1]):
            out[:, i + j] += a[:, i] * b[:, j]
    return out


def _antiderivative_steps(c):
    k = np.arange(1, c.shape[1] + 1).reshape((1, -1) + (1,) * (c.ndim - 2))
    return np.concatenate([np.zeros_like(c[:, :1]), c / k], axis=1)


@dataclass(frozen=True)
class _StepTables:
    """Per-step polynomials in the local step parameter for every coordinate."""

    qc: np.ndarray  # (m, L, n)  q_i(s)
    gc: np.ndarray  # (m, L, n)  G_i(s) = sum_l C_il p_l(s)
    wc: np.ndarray  # (m, 2L-1, n)  int_0^s G_i dq_i
    w_nodes: np.ndarray  # (m + 1, n) cumulative W_i at nodes


def _step_tables(traj: Trajectory, C: np.ndarray) -> _StepTables:
    n = traj.n
    qc = traj.coef[:, :, :n]
    gc = traj.coef[:, :, n:] @ C.T
    wc = _antiderivative_steps(_polymul_steps(gc, derivative_coefficients(qc)))
    inc = wc.sum(axis=1)
    w_nodes = np.vstack([np.zeros((1, n)), np.cumsum(inc, axis=0)])
    return _StepTables(qc=qc, gc=gc, wc=wc, w_nodes=w_nodes)


def _work_components(traj, tables, t):
    idx, s = traj.locate(np.atleast_1d(t))
    idx, s = idx.ravel(), s.ravel()
    return tables.w_nodes[idx] + polyval_steps(tables.wc[idx], s)


# --- segments --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MonotoneSegment:
    """A maximal time interval on which q_i(t) is strictly monotone.

    ``times``, ``q`` and ``G`` are the sample table (segment endpoints plus
    the trajectory nodes strictly inside).  A frozen segment is an interval
    where q_i stays constant; it carries no force table and does no work.
    """

    coord: int
    t_a: float
    t_b: float
    direction: int
    frozen: bool
    times: np.ndarray
    q: np.ndarray
    G: np.ndarray
    offset: float
    _table: dict = field(repr=False, default=None)

    @property
    def duration(self) -> float:
        return self.t_b - self.t_a

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.q.min()), float(self.q.max())

    def contains_time(self, t, closed_end=False) -> bool:
        return self.t_a <= t < self.t_b or (closed_end and t == self.t_b)

    def _check(self, x):
        if self.frozen:
            raise ForceDomainError(self.coord, x, self.bounds)
        lo, hi = self.bounds
        if not lo <= x <= hi:
            raise ForceDomainError(self.coord, x, (lo, hi))

    def _locate(self, x):
        self._check(x)
        tb = self._table
        return _kernels.locate(x, tb["bp"], tb["qc"], tb["slo"], tb["shi"], tb["qa"], tb["qb"], tb["count"])

    def force(self, x) -> float:
        """G_i(q_i): the damping force row seen as a function of q_i."""
        k, s = self._locate(float(x))
        return float(_kernels.polyval(self._table["gc"][k], s))

    def slope(self, x) -> float:
        """dG_i/dq_i; unbounded at turning points."""
        tb = self._table
        k, s = self._locate(float(x))
        dq = _kernels.polyder_val(tb["qc"][k], s)
        dg = _kernels.polyder_val(tb["gc"][k], s)
        return float(dg / dq) if dq != 0.0 else math.inf

    def potential(self, x) -> float:
        """V_i(q_i) = W_i(t(q_i)), continuous with the neighbouring segments."""
        if self.frozen:
            return self.offset
        tb = self._table
        k, s = self._locate(float(x))
        return float(tb["voff"][k] + _kernels.polyval(tb["vc"][k], s))

    def time_of(self, x) -> float:
        """Inverse t(q_i) on this segment."""
        tb = self._table
        k, s = self._locate(float(x))
        return float(tb["tj"][k] + s * tb["hj"][k])


def _moving_roots(traj, i, j0, j1, min_gap):
    """Roots of q'_i(t) = 0 strictly inside the steps j0..j1-1."""
    n = traj.n
    pc = traj.coef[j0:j1, :, n + i]
    t = traj.t
    probe = np.linspace(0.0, 1.0, 9)
    vals = np.stack([np.polynomial.polynomial.polyval(s, pc.T) for s in probe], axis=1)
    roots = []
    for r in range(pc.shape[0]):
        j = j0 + r
        h = t[j + 1] - t[j]
        c = pc[r]

        def p(tt, c=c, tj=t[j], h=h):
            return np.polynomial.polynomial.polyval((tt - tj) / h, c)

        v = vals[r]
        for k in range(len(probe) - 1):
            ta = t[j] + probe[k] * h
            tb = t[j] + probe[k + 1] * h if k + 1 < len(probe) - 1 else t[j + 1]
            if v[k] == 0.0:
                roots.append(ta)
            elif v[k] * v[k + 1] < 0.0:
                roots.append(brentq(p, ta, tb, xtol=1e-12, rtol=4 * np.finfo(float).eps))
    lo, hi = t[j0], t[j1]
    roots = sorted(r for r in roots if lo + min_gap < r < hi - min_gap)
    merged = []
    for r in roots:
        if not merged or r - merged[-1] > min_gap:
            merged.append(r)
    return merged


def _intervals(traj: Trajectory, i: int, freeze_tol: float):
    """(t_a, t_b, frozen) triples partitioning the trajectory for coordinate i."""
    n = traj.n
    still = np.all(np.abs(traj.coef[:, :, n + i]) <= freeze_tol, axis=1)
    min_gap = 1e-9 * (traj.t_end - traj.t0)
    out = []
    j = 0
    m = still.size
    while j < m:
        k = j
        while k < m and still[k] == still[j]:
            k += 1
        a, b = traj.t[j], traj.t[k]
        if still[j]:
            out.append((a, b, True))
        else:
            cuts = [a] + _moving_roots(traj, i, j, k, min_gap) + [b]
            out.extend((x, y, False) for x, y in zip(cuts[:-1], cuts[1:]))
        j = k
    return out


def _build_segment(traj, tables, i, t_a, t_b, frozen, C_row_nonzero):
    inside = traj.t[(traj.t > t_a) & (traj.t < t_b)]
    times = np.concatenate([[t_a], inside, [t_b]])
    idx, s = traj.locate(times)
    # piece k spans [times[k], times[k+1]] inside step idx[k]
    j = idx[:-1]
    h = traj.t[j + 1] - traj.t[j]
    slo = s[:-1]
    shi = (times[1:] - traj.t[j]) / h
    qc = tables.qc[j, :, i]
    gc = tables.gc[j, :, i]
    qa = polyval_steps(qc, slo)
    qb = polyval_steps(qc, shi)
    q_samples = np.concatenate([qa, qb[-1:]])
    g_samples = np.concatenate([polyval_steps(gc, slo), polyval_steps(gc[-1:], shi[-1:])]) if len(j) else np.zeros(1)
    if not C_row_nonzero:
        g_samples = np.zeros_like(g_samples)
    offset = float(_work_components(traj, tables, t_a)[0, i])
    if frozen:
        return MonotoneSegment(i, float(t_a), float(t_b), 0, True, times, q_samples, np.zeros_like(q_samples), offset)
    mid = 0.5 * (t_a + t_b)
    direction = 1 if traj.evaluate(mid)[traj.n + i] > 0 else -1
    order = np.arange(len(j)) if direction > 0 else np.arange(len(j))[::-1]
    table = {
        "bp": np.ascontiguousarray(np.minimum(qa, qb)[order]),
        "qa": np.ascontiguousarray(qa[order]),
        "qb": np.ascontiguousarray(qb[order]),
        "slo": np.ascontiguousarray(slo[order]),
        "shi": np.ascontiguousarray(shi[order]),
        "qc": np.ascontiguousarray(qc[order]),
        "gc": np.ascontiguousarray(gc[order] if C_row_nonzero else np.zeros_like(gc)),
        "vc": np.ascontiguousarray(tables.wc[j, :, i][order]),
        "voff": np.ascontiguousarray(tables.w_nodes[j, i][order]),
        "tj": np.ascontiguousarray(traj.t[j][order]),
        "hj": np.ascontiguousarray(h[order]),
        "count": len(j),
    }
    for v in table.values():
        if isinstance(v, np.ndarray):
            v.setflags(write=False)
    return MonotoneSegment(
        i, float(t_a), float(t_b), direction, False, times, q_samples, g_samples, offset, table
    )


def segment_trajectory(traj: Trajectory, i: int, C=None, freeze_tol: float = 0.0) -> list[MonotoneSegment]:
    """Split coordinate i of a trajectory at the zeros of q'_i.

    Segment tables carry G_i = sum_l C_il p_l; with ``C`` omitted the
    damping is taken as zero.  Steps whose q'_i polynomial has every
    coefficient within ``freeze_tol`` of zero form frozen segments.
    """
    if not 0 <= i < traj.n:
        raise ConfigurationError(f"coordinate index {i} out of range for n = {traj.n}")
    C = np.zeros((traj.n, traj.n)) if C is None else np.asarray(C, dtype=float)
    tables = _step_tables(traj, C)
    return _segments_for(traj, tables, i, C, freeze_tol)


def _segments_for(traj, tables, i, C, freeze_tol):
    row_nonzero = bool(np.any(C[i] != 0.0))
    return [
        _build_segment(traj, tables, i, a, b, frozen, row_nonzero) for a, b, frozen in _intervals(traj, i, freeze_tol)
    ]


# --- conservative force fields ---------------------------------------------------


class ConservativeForceField:
    """q -> -K q - G(q) with each G_i taken from one monotone segment.

    Coordinates without a segment (undamped rows, frozen segments) have
    G_i = 0 and no domain bound.
    """

    def __init__(self, K, segments: Sequence[MonotoneSegment | None] | None = None):
        K = np.array(K, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ConfigurationError(f"K must be square, got shape {K.shape}")
        n = K.shape[0]
        segments = [None] * n if segments is None else list(segments)
        if len(segments) != n:
            raise ConfigurationError(f"need one segment (or None) per coordinate, got {len(segments)}")
        segments = [None if s is None or s.frozen else s for s in segments]
        self.K = K
        self.n = n
        self.segments = tuple(segments)
        self._pack()

    @classmethod
    def linear(cls, K) -> "ConservativeForceField":
        return cls(K)

    def _pack(self):
        n = self.n
        live = [s for s in self.segments if s is not None]
        P = max([s._table["count"] for s in live], default=1)
        L = max([s._table["qc"].shape[1] for s in live], default=1)
        self._active = np.array([s is not None and s._table["count"] > 0 for s in self.segments])
        self._lower = np.full(n, -np.inf)
        self._upper = np.full(n, np.inf)
        self._count = np.zeros(n, dtype=np.int64)
        arrays = {k: np.zeros((n, P)) for k in ("bp", "slo", "shi", "qa", "qb")}
        arrays["qc"] = np.zeros((n, P, L))
        arrays["gc"] = np.zeros((n, P, L))
        for i, seg in enumerate(self.segments):
            if seg is None or not self._active[i]:
                continue
            tb = seg._table
            c = tb["count"]
            self._count[i] = c
            self._lower[i], self._upper[i] = seg.bounds
            for k in ("bp", "slo", "shi", "qa", "qb"):
                arrays[k][i, :c] = tb[k]
            arrays["qc"][i, :c, : tb["qc"].shape[1]] = tb["qc"]
            arrays["gc"][i, :c, : tb["gc"].shape[1]] = tb["gc"]
        self._arrays = arrays

    @property
    def bounds(self) -> np.ndarray:
        return np.column_stack([self._lower, self._upper])

    def kernel_args(self):
        a = self._arrays
        return (
            self.K,
            self._active,
            self._lower,
            self._upper,
            a["bp"],
            a["qc"],
            a["gc"],
            a["slo"],
            a["shi"],
            a["qa"],
            a["qb"],
            self._count,
        )

    def force(self, q) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ConfigurationError(f"position must have length {self.n}")
        out = np.empty(self.n)
        status, i = _kernels.field_force(q, *self.kernel_args(), out)
        if status != _kernels.OK:
            raise ForceDomainError(int(i), float(q[i]), (self._lower[i], self._upper[i]))
        return out

    def substituted(self, q) -> np.ndarray:
        """G(q) alone."""
        q = np.asarray(q, dtype=float)
        return np.array([0.0 if s is None else s.force(q[i]) for i, s in enumerate(self.segments)])

    def jacobian(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        d = np.array([0.0 if s is None else s.slope(q[i]) for i, s in enumerate(self.segments)])
        return -self.K - np.diag(d)

    def potential(self, q) -> float:
        q = np.asarray(q, dtype=float)
        v = 0.5 * float(q @ self.K @ q)
        return v + sum(0.0 if s is None else s.potential(q[i]) for i, s in enumerate(self.segments))

    def energy(self, q, p) -> float:
        p = np.asarray(p, dtype=float)
        return 0.5 * float(p @ p) + self.potential(q)


# --- the substituting system -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class SubstitutingSystem:
    """Per-coordinate monotone segments of one damped trajectory plus the work tables."""

    system: DampedSystem
    trajectory: Trajectory
    segments: tuple[tuple[MonotoneSegment, ...], ...]
    _tables: _StepTables = field(repr=False)

    @property
    def n(self) -> int:
        return self.system.n

    def segment_index_at(self, i: int, t: float) -> int:
        """Segment of coordinate i holding time t; intervals are [t_a, t_b), the last one closed."""
        segs = self.segments[i]
        if not segs[0].t_a <= t <= segs[-1].t_b:
            raise OutOfRangeError(f"time {t!r} outside [{segs[0].t_a!r}, {segs[-1].t_b!r}]")
        starts = [s.t_a for s in segs]
        k = int(np.searchsorted(starts, t, side="right")) - 1
        return max(0, min(k, len(segs) - 1))

    def segment_at(self, i: int, t: float) -> MonotoneSegment:
        return self.segments[i][self.segment_index_at(i, t)]

    def work_components(self, t) -> np.ndarray:
        """W_i(t) = int_0^t G_i dq_i along the curve; shape (..., n)."""
        scalar = np.ndim(t) == 0
        out = _work_components(self.trajectory, self._tables, t)
        return out[0] if scalar else out.reshape(np.shape(t) + (self.n,))

    def work(self, t):
        return self.work_components(t).sum(axis=-1)

    def energy(self, t):
        q, p = self.trajectory.qp(t)
        return energy_array(self.system, q, p)

    def hat_H(self, t):
        return self.energy(t) + self.work(t)

    def hat_L(self, t):
        q, p = self.trajectory.qp(t)
        kinetic = 0.5 * np.einsum("...i,...i->...", p, p)
        pot = 0.5 * np.einsum("...i,ij,...j->...", q, self.system.K, q)
        return kinetic - pot - self.work(t)

    def selection_at(self, t: float) -> list[int]:
        return [self.segment_index_at(i, t) for i in range(self.n)]

    def force_field(self, selector) -> ConservativeForceField:
        """Field built from one segment per coordinate (a list of indices)."""
        selector = list(selector)
        if len(selector) != self.n:
            raise ConfigurationError(f"selector needs {self.n} segment indices, got {len(selector)}")
        chosen = []
        for i, k in enumerate(selector):
            if not 0 <= k < len(self.segments[i]):
                raise ConfigurationError(f"coordinate {i} has no segment {k}")
            seg = self.segments[i][k]
            chosen.append(seg if np.any(self.system.C[i] != 0.0) else None)
        return ConservativeForceField(self.system.K, chosen)

    def equivalent_stiffness(self, selector, q, eps=None):
        """Diagonal K~_ii = G_i(q_i) / q_i.

        Returns (values, defined); entries with |q_i| <= eps (default 1e-8
        times the segment's coordinate range) are NaN and flagged undefined.
        """
        q = np.asarray(q, dtype=float)
        values = np.full(self.n, np.nan)
        defined = np.zeros(self.n, dtype=bool)
        for i, k in enumerate(selector):
            seg = self.segments[i][k]
            lo, hi = seg.bounds
            e = 1e-8 * (hi - lo) if eps is None else eps
            if abs(q[i]) <= e:
                continue
            g = 0.0 if seg.frozen or not np.any(self.system.C[i] != 0.0) else seg.force(q[i])
            values[i] = g / q[i]
            defined[i] = True
        return values, defined


def build_substituting_system(traj: Trajectory, sys: DampedSystem, freeze_tol: float = 0.0) -> SubstitutingSystem:
    if traj.n != sys.n:
        raise ConfigurationError(f"trajectory has {traj.n} coordinates, system has {sys.n}")
    tables = _step_tables(traj, sys.C)
    segments = tuple(tuple(_segments_for(traj, tables, i, sys.C, freeze_tol)) for i in range(sys.n))
    return SubstitutingSystem(system=sys, trajectory=traj, segments=segments, _tables=tables)


def work_along(traj: Trajectory, sys: DampedSystem, t):
    """Total work W(t) = sum_i int_0^t G_i dq_i done against the damping."""
    tables = _step_tables(traj, sys.C)
    out = _work_components(traj, tables, t).sum(axis=-1)
    return float(out[0]) if np.ndim(t) == 0 else out.reshape(np.shape(t))


def hat_H(sub: SubstitutingSystem, t):
    return sub.hat_H(t)


def hat_L(sub: SubstitutingSystem, t):
    return sub.hat_L(t)


def equivalent_stiffness(sub: SubstitutingSystem, selector, q, eps=None):
    return sub.equivalent_stiffness(selector, q, eps)


def force_field(sub: SubstitutingSystem, selector) -> ConservativeForceField:
    return sub.force_field(selector)
