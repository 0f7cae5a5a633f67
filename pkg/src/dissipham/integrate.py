"""Time integration of damped and substituting conservative flows.

The damped flow is advanced with an adaptive Dormand-Prince 5(4) pair and
stored as a Trajectory: nodes plus per-step quintic Hermite polynomials
built from the node values and first and second derivatives.  Conservative flows use fixed-step
velocity Verlet, whose one-step tangent maps are symplectic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigurationError, ForceDomainError, IntegrationError, OutOfRangeError
from .model import DampedSystem, initial_condition

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array(_A[6] + [0.0])
_A = [np.array(row) for row in _A]
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def hermite_coefficients(t, y, f, g=None):
    """Per-step Hermite coefficients in the local variable s = (t - t_j)/h_j.

    Cubic from values and first derivatives, quintic when second derivatives
    ``g`` are supplied.  Returns shape (m, deg + 1, d), ascending powers of s.
    """
    h = np.diff(t)[:, None]
    y0, y1 = y[:-1], y[1:]
    d0, d1 = h * f[:-1], h * f[1:]
    if g is None:
        return np.stack([y0, d0, -3 * y0 - 2 * d0 + 3 * y1 - d1, 2 * y0 + d0 - 2 * y1 + d1], axis=1)
    e0, e1 = h**2 * g[:-1], h**2 * g[1:]
    dv = y1 - y0 - d0 - 0.5 * e0
    dd = d1 - d0 - e0
    de = e1 - e0
    return np.stack(
        [y0, d0, 0.5 * e0, 10 * dv - 4 * dd + 0.5 * de, -15 * dv + 7 * dd - de, 6 * dv - 3 * dd + 0.5 * de],
        axis=1,
    )


def derivative_coefficients(coef):
    """Coefficients of d/ds of per-step polynomials."""
    k = np.arange(1, coef.shape[1]).reshape((1, -1) + (1,) * (coef.ndim - 2))
    return coef[:, 1:] * k


def polyval_steps(coef, s):
    """Evaluate ascending-power polynomials coef[k, :, ...] at s[k] (Horner)."""
    s = np.asarray(s)
    shape = (-1,) + (1,) * (coef.ndim - 2)
    s = s.reshape(shape)
    out = coef[:, -1]
    for k in range(coef.shape[1] - 2, -1, -1):
        out = out * s + coef[:, k]
    return out


@dataclass(frozen=True)
class Trajectory:
    """Phase curve samples (t_j, q_j, p_j) with Hermite dense output.

    ``f`` holds the time derivatives (q', p') at the nodes and ``g`` the
    optional second derivatives; with ``g`` the interpolant is quintic,
    otherwise cubic.  Queries outside [t_0, t_m] raise OutOfRangeError.
    """

    t: np.ndarray
    y: np.ndarray
    f: np.ndarray
    a: np.ndarray
    g: np.ndarray | None = None
    rtol: float | None = None
    atol: float | None = None
    h: float | None = None
    coef: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        f = np.asarray(self.f, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ConfigurationError("a trajectory needs at least two samples")
        if np.any(np.diff(t) <= 0):
            raise ConfigurationError("trajectory times must be strictly increasing")
        if y.shape != (t.size, y.shape[1]) or f.shape != y.shape or y.shape[1] % 2:
            raise ConfigurationError("trajectory arrays have inconsistent shapes")
        g = None
        if self.g is not None:
            g = np.asarray(self.g, dtype=float)
            if g.shape != y.shape:
                raise ConfigurationError("second derivatives have the wrong shape")
            g.setflags(write=False)
            object.__setattr__(self, "g", g)
        for name, arr in (("t", t), ("y", y), ("f", f)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        coef = hermite_coefficients(t, y, f, g)
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)

    @property
    def n(self) -> int:
        return self.y.shape[1] // 2

    @property
    def t0(self) -> float:
        return float(self.t[0])

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    @property
    def q(self) -> np.ndarray:
        return self.y[:, : self.n]

    @property
    def p(self) -> np.ndarray:
        return self.y[:, self.n :]

    def locate(self, t):
        """Step index and local coordinate s in [0, 1] for each query time.

        Steps are half-open [t_j, t_j+1) except the last, which is closed.
        """
        t = np.asarray(t, dtype=float)
        lo, hi = self.t[0], self.t[-1]
        slack = 1e-13 * max(1.0, abs(lo), abs(hi))
        if np.any(t < lo - slack) or np.any(t > hi + slack) or not np.all(np.isfinite(t)):
            bad = t[(t < lo - slack) | (t > hi + slack) | ~np.isfinite(t)]
            raise OutOfRangeError(f"time {bad.ravel()[0]!r} outside trajectory range [{lo!r}, {hi!r}]")
        t = np.clip(t, lo, hi)
        idx = np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, self.t.size - 2)
        s = (t - self.t[idx]) / (self.t[idx + 1] - self.t[idx])
        return idx, s

    def evaluate(self, t) -> np.ndarray:
        """State y = (q, p) at time(s) t; shape (..., 2n)."""
        scalar = np.ndim(t) == 0
        idx, s = self.locate(np.atleast_1d(t))
        out = polyval_steps(self.coef[idx.ravel()], s.ravel()).reshape(idx.shape + (2 * self.n,))
        # nodes are reproduced exactly
        exact = s.ravel() == 0.0
        if np.any(exact):
            out.reshape(-1, 2 * self.n)[exact] = self.y[idx.ravel()[exact]]
        return out[0] if scalar else out

    def derivative(self, t) -> np.ndarray:
        """Time derivative of the interpolant at time(s) t."""
        scalar = np.ndim(t) == 0
        idx, s = self.locate(np.atleast_1d(t))
        idx, s = idx.ravel(), s.ravel()
        dc = derivative_coefficients(self.coef[idx])
        h = (self.t[idx + 1] - self.t[idx])[:, None]
        out = polyval_steps(dc, s) / h
        return out[0] if scalar else out

    def qp(self, t):
        y = self.evaluate(t)
        return y[..., : self.n], y[..., self.n :]


# --- damped flow -----------------------------------------------------------


def _initial_step(fun, t0, y0, f0, rtol, atol, t_end):
    sc = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / sc) ** 2))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, t_end - t0)
    f1 = fun(t0 + h0, y0 + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / sc) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, t_end - t0)


def dopri(fun, t0, y0, t_end, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, max_step=math.inf):
    """Adaptive Dormand-Prince 5(4) with local extrapolation.

    Returns (t, y, f) node arrays.  Raises IntegrationError if the step size
    underflows or the solution stops being finite.
    """
    if not t_end > t0:
        raise ConfigurationError(f"t_end must exceed t0, got {t_end!r}")
    if not (rtol > 0 and atol > 0):
        raise ConfigurationError("tolerances must be positive")
    y = np.array(y0, dtype=float)
    d = y.size
    f = fun(t0, y)
    ts, ys, fs = [t0], [y], [f]
    t = t0
    h = min(_initial_step(fun, t0, y, f, rtol, atol, t_end), max_step)
    k = np.empty((7, d))
    eps16 = 16 * np.finfo(float).eps
    while t < t_end:
        if t + 1.01 * h >= t_end:
            h = t_end - t
        if h <= eps16 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t)
        k[0] = f
        for i in range(1, 7):
            k[i] = fun(t + _C[i] * h, y + h * (_A[i] @ k[:i]))
        y_new = y + h * (_B[:6] @ k[:6])
        r = h * (_E @ k) / (atol + rtol * np.maximum(np.abs(y), np.abs(y_new)))
        err_norm = math.sqrt(float(r @ r) / d)
        if not math.isfinite(err_norm) or not math.isfinite(float(y_new.sum())):
            h *= 0.25
            continue
        if err_norm <= 1.0:
            t = t_end if h == t_end - t else t + h
            y, f = y_new, k[6].copy()
            ts.append(t)
            ys.append(y)
            fs.append(f)
            factor = 5.0 if err_norm == 0 else min(5.0, 0.9 * err_norm ** -0.2)
        else:
            factor = max(0.2, 0.9 * err_norm ** -0.2)
        h = min(h * factor, max_step)
    return np.array(ts), np.array(ys), np.array(fs)


def dense_max_step(sys: DampedSystem, rtol: float) -> float:
    """Step cap keeping the quintic Hermite interpolation error near 0.1*rtol.

    The remainder is h^6/46080 * |y^(6)| and |y^(6)| <= omega^6 |y| for the
    linear flow, with omega the spectral radius of the system matrix.
    """
    omega = sys.max_frequency()
    if omega == 0.0:
        return math.inf
    return (46080 * 0.1 * rtol) ** (1 / 6) / omega


def integrate_damped(sys: DampedSystem, a, t_end, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, max_step=None):
    """Integrate q'' + C q' + K q = 0 from a = (q0, q0') over [0, t_end]."""
    a = initial_condition(a, sys.n)
    if not t_end > 0:
        raise ConfigurationError(f"t_end must be positive, got {t_end!r}")
    A = sys.system_matrix()
    if max_step is None:
        max_step = min(dense_max_step(sys, rtol), t_end / 8)
    t, y, f = dopri(lambda _t, y: A @ y, 0.0, a, float(t_end), rtol, atol, max_step)
    # node derivatives straight from the vector field: y' = A y, y'' = A y'
    f = y @ A.T
    return Trajectory(t=t, y=y, f=f, g=f @ A.T, a=a, rtol=rtol, atol=atol)


# --- variational flow --------------------------------------------------------


@dataclass(frozen=True)
class TangentSeries:
    """Jacobians J(t_j) of the flow map with respect to the initial condition."""

    t: np.ndarray
    J: np.ndarray

    def determinants(self) -> np.ndarray:
        return np.linalg.det(self.J)

    def at(self, j: int) -> np.ndarray:
        return self.J[j]


def integrate_variational(sys: DampedSystem, a, t_end, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL):
    """Integrate the flow together with its tangent map, J' = A J, J(0) = I."""
    a = initial_condition(a, sys.n)
    if not t_end > 0:
        raise ConfigurationError(f"t_end must be positive, got {t_end!r}")
    d = 2 * sys.n
    A = sys.system_matrix()

    def rhs(_t, z):
        y = z[:d]
        J = z[d:].reshape(d, d)
        return np.concatenate([A @ y, (A @ J).ravel()])

    z0 = np.concatenate([a, np.eye(d).ravel()])
    max_step = min(dense_max_step(sys, rtol), t_end / 8)
    t, z, _ = dopri(rhs, 0.0, z0, float(t_end), rtol, atol, max_step)
    return TangentSeries(t=t, J=z[:, d:].reshape(-1, d, d))


# --- conservative flow ---------------------------------------------------------


def default_verlet_step(force) -> float:
    """h = T_min / 1000 with T_min the shortest period of the stiffness part."""
    K = np.asarray(force.K, dtype=float)
    lam = np.abs(np.linalg.eigvals(K)).max() if K.size else 0.0
    if lam == 0.0:
        raise ConfigurationError("force field has no stiffness scale; pass the step h explicitly")
    return 2 * math.pi / math.sqrt(lam) / 1000


def _step_count(t_end, h):
    if not t_end > 0:
        raise ConfigurationError(f"t_end must be positive, got {t_end!r}")
    if not h > 0:
        raise ConfigurationError(f"step must be positive, got {h!r}")
    return max(1, math.ceil(t_end / h - 1e-9))


def integrate_conservative(force, a, t_end, h=None, t0=0.0):
    """Velocity Verlet for q'' = force(q) from a = (q0, p0).

    The number of steps is ceil(t_end / h); the step is then shrunk so the
    last node lands on t0 + t_end exactly.
    """
    if h is None:
        h = default_verlet_step(force)
    a = initial_condition(a)
    n = a.size // 2
    N = _step_count(t_end, h)
    h = t_end / N
    ts = t0 + h * np.arange(N + 1)
    ts[-1] = t0 + t_end
    Q = np.empty((N + 1, n))
    P = np.empty((N + 1, n))
    F = np.empty((N + 1, n))
    if hasattr(force, "kernel_args"):
        status, j, i = _kernels.verlet(a[:n].copy(), a[n:].copy(), h, N, *force.kernel_args(), Q, P, F)
        if status != _kernels.OK:
            lo, hi = force.bounds[i]
            raise ForceDomainError(int(i), float(Q[j, i]), (lo, hi), t=float(ts[j]))
    else:
        _verlet_python(force, a, h, ts, Q, P, F)
    y = np.hstack([Q, P])
    f = np.hstack([P, F])
    return Trajectory(t=ts, y=y, f=f, a=a, h=h)


def _verlet_python(force, a, h, ts, Q, P, F):
    n = a.size // 2
    q = a[:n].copy()
    p = a[n:].copy()
    try:
        acc = force.force(q)
    except ForceDomainError as exc:
        raise ForceDomainError(exc.coord, exc.value, exc.bounds, t=float(ts[0])) from None
    Q[0], P[0], F[0] = q, p, acc
    half = 0.5 * h
    for j in range(1, ts.size):
        p = p + half * acc
        q = q + h * p
        try:
            acc = force.force(q)
        except ForceDomainError as exc:
            raise ForceDomainError(exc.coord, exc.value, exc.bounds, t=float(ts[j])) from None
        p = p + half * acc
        Q[j], P[j], F[j] = q, p, acc


def verlet_step(force, q, p, h):
    acc = force.force(q)
    p_half = p + 0.5 * h * acc
    q1 = q + h * p_half
    return q1, p_half + 0.5 * h * force.force(q1)


def verlet_tangent(force, q, p, h) -> np.ndarray:
    """Exact Jacobian of one Verlet step: kick(h/2) . drift(h) . kick(h/2)."""
    q = np.asarray(q, dtype=float)
    n = q.size
    eye = np.eye(n)
    q1, _ = verlet_step(force, q, np.asarray(p, dtype=float), h)
    kick0 = np.block([[eye, np.zeros((n, n))], [0.5 * h * force.jacobian(q), eye]])
    drift = np.block([[eye, h * eye], [np.zeros((n, n)), eye]])
    kick1 = np.block([[eye, np.zeros((n, n))], [0.5 * h * force.jacobian(q1), eye]])
    return kick1 @ drift @ kick0


def conservative_tangent(force, traj: Trajectory) -> TangentSeries:
    """Propagate the tangent map along a Verlet trajectory (discrete variational equation)."""
    n = traj.n
    steps = np.diff(traj.t)
    if hasattr(force, "kernel_args") and steps.size and np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        J = np.empty((traj.t.size, 2 * n, 2 * n))
        _kernels.verlet_tangents(np.ascontiguousarray(traj.q), float(steps[0]), *force.kernel_args(), J)
        return TangentSeries(t=traj.t.copy(), J=J)
    J = np.eye(2 * n)
    Js = [J]
    for j in range(traj.t.size - 1):
        h = traj.t[j + 1] - traj.t[j]
        M = verlet_tangent(force, traj.q[j], traj.p[j], h)
        J = M @ J
        Js.append(J)
    return TangentSeries(t=traj.t.copy(), J=np.array(Js))
