"""Numerical checks that the substituting system shares the damped phase curve.

Each check returns a ReportEntry whose pass flag is ``residual <= tolerance``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ForceDomainError
from .integrate import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    conservative_tangent,
    integrate_conservative,
    integrate_variational,
    verlet_tangent,
)
from .model import DampedSystem, energy_array, initial_condition
from .substitute import MonotoneSegment, SubstitutingSystem

DEFAULT_TOLERANCES = {
    "gradient_match": 1e-8,
    "phase_coincidence": 1e-6,
    "hatH_constancy": 1e-8,
    "volume_contraction": 1e-7,
    "conservative_volume": 1e-6,
    "verlet_symplectic": 1e-14,
    "energy_balance": 1e-9,
    "consistency": 0.0,
}
DEFAULT_VERLET_STEP = 1e-4


@dataclass(frozen=True)
class ReportEntry:
    check: str
    scenario: str
    residual: float
    tolerance: float
    runtime: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tolerance)

    def as_dict(self, include_runtime=False) -> dict:
        out = {
            "check": self.check,
            "scenario": self.scenario,
            "residual": _num(self.residual),
            "tolerance": _num(self.tolerance),
            "passed": self.passed,
        }
        if include_runtime:
            out["runtime"] = _num(self.runtime)
        if self.details:
            out["details"] = _clean(self.details)
        return out


def _num(x):
    x = float(x)
    if math.isfinite(x):
        return float(format(x, ".17g"))
    return "inf" if x > 0 else ("-inf" if x < 0 else "nan")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


@dataclass
class VerificationReport:
    entries: list[ReportEntry] = field(default_factory=list)

    def add(self, entry: ReportEntry):
        self.entries.append(entry)

    def extend(self, entries):
        self.entries.extend(entries)

    def sorted(self) -> list[ReportEntry]:
        return sorted(self.entries, key=lambda e: (e.check, e.scenario))

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_json(self, include_runtime=False) -> str:
        return json.dumps([e.as_dict(include_runtime) for e in self.sorted()], indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        rows = [("check", "scenario", "residual", "tolerance", "status")]
        for e in self.sorted():
            rows.append(
                (e.check, e.scenario, format(e.residual, ".6e"), format(e.tolerance, ".1e"), "PASS" if e.passed else "FAIL")
            )
        widths = [max(len(r[c]) for r in rows) for c in range(5)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _timed(fn):
    def wrapper(*args, **kw):
        start = time.perf_counter()
        entry = fn(*args, **kw)
        return ReportEntry(
            entry.check, entry.scenario, entry.residual, entry.tolerance, time.perf_counter() - start, entry.details
        )

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def default_times(sub: SubstitutingSystem, samples=2001) -> np.ndarray:
    """Uniform samples plus every segment boundary."""
    traj = sub.trajectory
    t = np.linspace(traj.t0, traj.t_end, samples)
    bounds = [s.t_a for segs in sub.segments for s in segs]
    return np.unique(np.concatenate([t, bounds]))


@_timed
def check_gradient_match(sys: DampedSystem, sub: SubstitutingSystem, times=None, scenario="", tol=None):
    """Largest |(Kq + G(q))_i - (Kq + Cq')_i| on the curve, plus the momentum identity."""
    tol = DEFAULT_TOLERANCES["gradient_match"] if tol is None else tol
    times = default_times(sub) if times is None else np.atleast_1d(np.asarray(times, dtype=float))
    q, p = sub.trajectory.qp(times)
    Kq = q @ sys.K.T
    target = Kq + p @ sys.C.T
    worst = 0.0
    for i in range(sys.n):
        damped = bool(np.any(sys.C[i] != 0.0))
        for j, t in enumerate(times):
            seg = sub.segment_at(i, t)
            g = seg.force(q[j, i]) if damped and not seg.frozen else 0.0
            worst = max(worst, abs((Kq[j, i] + g) - target[j, i]))
    momentum = float(np.max(np.abs(p - p))) if p.size else 0.0
    residual = max(worst, momentum)
    return ReportEntry("gradient_match", scenario, residual, tol, details={"samples": int(times.size)})


def _window(sub: SubstitutingSystem, segment: MonotoneSegment):
    """Segment indices per coordinate at the segment start and the common end time."""
    t_a = segment.t_a
    selector = []
    end = segment.t_b
    for i in range(sub.n):
        if i == segment.coord:
            k = sub.segments[i].index(segment)
        else:
            k = sub.segment_index_at(i, t_a)
        seg = sub.segments[i][k]
        if np.any(sub.system.C[i] != 0.0) and not seg.frozen:
            end = min(end, seg.t_b)
        selector.append(k)
    return selector, end


@_timed
def check_phase_coincidence(sys, sub: SubstitutingSystem, segment: MonotoneSegment, h=DEFAULT_VERLET_STEP, scenario="", tol=None):
    """Re-integrate the substituted field from the segment start and compare with the damped curve.

    Integration stops 10 h before the window end so the Verlet iterate does
    not overshoot the force table at the turning point.
    """
    tol = DEFAULT_TOLERANCES["phase_coincidence"] if tol is None else tol
    selector, end = _window(sub, segment)
    delta = 10 * h
    duration = end - segment.t_a - delta
    details = {"coord": segment.coord + 1, "t_a": segment.t_a, "t_b": end, "delta": delta, "h": h}
    if duration <= 0:
        details["skipped"] = "window shorter than the stopping margin"
        return ReportEntry("phase_coincidence", scenario, 0.0, tol, details=details)
    field_ = sub.force_field(selector)
    y0 = sub.trajectory.evaluate(segment.t_a)
    try:
        ct = integrate_conservative(field_, y0, duration, h, t0=segment.t_a)
    except ForceDomainError as exc:
        details["error"] = str(exc)
        return ReportEntry("phase_coincidence", scenario, math.inf, tol, details=details)
    residual = float(np.linalg.norm(ct.y - sub.trajectory.evaluate(ct.t), axis=1).max())
    return ReportEntry("phase_coincidence", scenario, residual, tol, details=details)


def phase_coincidence_all(sys, sub, h=DEFAULT_VERLET_STEP, scenario="", tol=None):
    """One phase-coincidence entry per non-frozen segment of every damped coordinate."""
    out = []
    for i in range(sub.n):
        if not np.any(sys.C[i] != 0.0):
            continue
        for seg in sub.segments[i]:
            if not seg.frozen:
                out.append(check_phase_coincidence(sys, sub, seg, h, scenario, tol))
    if not out:
        # nothing damped: the whole curve is one conservative window
        out.append(check_zero_damping_identity(sys, sub, h=h, scenario=scenario, tol=tol))
    return out


@_timed
def check_zero_damping_identity(sys, sub: SubstitutingSystem, h=DEFAULT_VERLET_STEP, scenario="", tol=None):
    """For C = 0 the substituting field is -Kq; re-integrate the whole curve with it."""
    tol = DEFAULT_TOLERANCES["phase_coincidence"] if tol is None else tol
    traj = sub.trajectory
    field_ = sub.force_field([0] * sub.n)
    ct = integrate_conservative(field_, traj.evaluate(traj.t0), traj.t_end - traj.t0, h, t0=traj.t0)
    residual = float(np.linalg.norm(ct.y - traj.evaluate(ct.t), axis=1).max())
    return ReportEntry("phase_coincidence", scenario, residual, tol, details={"h": h, "whole_curve": True})


@_timed
def check_hatH_constancy(sub: SubstitutingSystem, samples=2001, scenario="", tol=None):
    """max |H^(t) - H^(0)| over uniform dense-output samples; tolerance scales with max(1, |H^(0)|)."""
    if samples < 2:
        raise ValueError("need at least two samples")
    tol = DEFAULT_TOLERANCES["hatH_constancy"] if tol is None else tol
    traj = sub.trajectory
    t = np.linspace(traj.t0, traj.t_end, samples)
    values = sub.hat_H(t)
    h0 = float(values[0])
    residual = float(np.max(np.abs(values - h0)))
    return ReportEntry(
        "hatH_constancy", scenario, residual, tol * max(1.0, abs(h0)), details={"hatH0": h0, "samples": samples}
    )


@_timed
def check_volume_contraction(sys: DampedSystem, a, t_end, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, scenario="", tol=None):
    """Relative deviation of det J(t) from exp(-tr(C) t) along the damped flow."""
    tol = DEFAULT_TOLERANCES["volume_contraction"] if tol is None else tol
    series = integrate_variational(sys, initial_condition(a, sys.n), t_end, rtol, atol)
    expected = np.exp(-np.trace(sys.C) * series.t)
    residual = float(np.max(np.abs(series.determinants() - expected) / expected))
    return ReportEntry(
        "volume_contraction",
        scenario,
        residual,
        tol,
        details={"trace_C": float(np.trace(sys.C)), "det_final": float(series.determinants()[-1])},
    )


@_timed
def check_conservative_volume(sub: SubstitutingSystem, segment: MonotoneSegment, t_end=None, h=DEFAULT_VERLET_STEP, scenario="", tol=None):
    """max |det J - 1| for the Verlet tangent maps along the substituted field.

    dG/dq blows up like 1/q' at a turning point, so the window is trimmed by
    10 h at both ends.
    """
    tol = DEFAULT_TOLERANCES["conservative_volume"] if tol is None else tol
    selector, end = _window(sub, segment)
    delta = 10 * h
    start = segment.t_a + delta
    span = end - start - delta
    t_end = span if t_end is None else min(t_end, span)
    details = {"coord": segment.coord + 1, "t_start": start, "duration": t_end, "h": h}
    if t_end <= 0:
        details["skipped"] = "window shorter than the stopping margin"
        return ReportEntry("conservative_volume", scenario, 0.0, tol, details=details)
    field_ = sub.force_field(selector)
    try:
        ct = integrate_conservative(field_, sub.trajectory.evaluate(start), t_end, h, t0=start)
    except ForceDomainError as exc:
        details["error"] = str(exc)
        return ReportEntry("conservative_volume", scenario, math.inf, tol, details=details)
    det = conservative_tangent(field_, ct).determinants()
    residual = float(np.max(np.abs(det - 1.0)))
    return ReportEntry("conservative_volume", scenario, residual if math.isfinite(residual) else math.inf, tol, details=details)


@_timed
def check_verlet_symplectic(sub: SubstitutingSystem, segment: MonotoneSegment, h=DEFAULT_VERLET_STEP, scenario="", tol=None):
    """|det M - 1| for the tangent map M of a single Verlet step inside the segment."""
    tol = DEFAULT_TOLERANCES["verlet_symplectic"] if tol is None else tol
    selector, end = _window(sub, segment)
    t = segment.t_a + 0.5 * (end - segment.t_a)
    y = sub.trajectory.evaluate(t)
    M = verlet_tangent(sub.force_field(selector), y[: sub.n], y[sub.n :], h)
    return ReportEntry("verlet_symplectic", scenario, abs(float(np.linalg.det(M)) - 1.0), tol, details={"t": t})


@_timed
def check_energy_balance(sub: SubstitutingSystem, samples=2001, scenario="", tol=None):
    """max |W(t) - (H(0) - H(t))| over the nodes and uniform dense-output samples."""
    tol = DEFAULT_TOLERANCES["energy_balance"] if tol is None else tol
    traj = sub.trajectory
    t = np.unique(np.concatenate([traj.t, np.linspace(traj.t0, traj.t_end, samples)]))
    q, p = traj.qp(t)
    H = energy_array(sub.system, q, p)
    residual = float(np.max(np.abs(sub.work(t) - (H[0] - H))))
    return ReportEntry("energy_balance", scenario, residual, tol, details={"samples": int(t.size)})


def check_consistency(gradient: ReportEntry, phase: list[ReportEntry], scenario=""):
    """Gradient matching and phase coincidence test the same identity; flag disagreement."""
    phase_ok = all(e.passed for e in phase)
    agree = gradient.passed == phase_ok
    return ReportEntry(
        "consistency",
        scenario,
        0.0 if agree else 1.0,
        DEFAULT_TOLERANCES["consistency"],
        details={"gradient_match": gradient.passed, "phase_coincidence": phase_ok},
    )
