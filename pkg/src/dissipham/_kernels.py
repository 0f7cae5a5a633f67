"""Compiled inner loops: inverse lookup of monotone piecewise polynomials and
velocity Verlet over substituted force tables.

A coordinate table is a set of pieces sorted by increasing coordinate value.
Piece k covers local parameter s in [slo[k], shi[k]] of a polynomial q_k(s)
(ascending coefficients qc[k]) with end values qa[k] = q_k(slo[k]) and
qb[k] = q_k(shi[k]); gc[k] holds the force polynomial in the same parameter.
"""

import numpy as np
from numba import njit

OK = 0
OUT_OF_DOMAIN = 1


@njit(cache=True)
def polyval(c, s):
    out = c[c.shape[0] - 1]
    for k in range(c.shape[0] - 2, -1, -1):
        out = out * s + c[k]
    return out


@njit(cache=True)
def polyder_val(c, s):
    deg = c.shape[0] - 1
    out = deg * c[deg]
    for k in range(deg - 1, 0, -1):
        out = out * s + k * c[k]
    return out


@njit(cache=True)
def solve_piece(c, x, lo, hi, qlo, qhi):
    """Parameter s in [lo, hi] with q(s) = x; safeguarded Newton."""
    fa = qlo - x
    fb = qhi - x
    if fa == 0.0:
        return lo
    if fb == 0.0:
        return hi
    if fa * fb > 0.0:
        # x sits in the rounding gap between neighbouring pieces
        return lo if abs(fa) < abs(fb) else hi
    a = lo
    b = hi
    s = lo + (hi - lo) * fa / (fa - fb)
    for _ in range(100):
        f = polyval(c, s) - x
        if f == 0.0:
            return s
        if (f > 0.0) == (fa > 0.0):
            a = s
        else:
            b = s
        df = polyder_val(c, s)
        sn = s - f / df if df != 0.0 else 0.5 * (a + b)
        if not (min(a, b) <= sn <= max(a, b)):
            sn = 0.5 * (a + b)
        if abs(sn - s) <= 2.3e-16 * max(1.0, abs(s)):
            return sn
        s = sn
    return s


@njit(cache=True)
def locate(x, bp, qc, slo, shi, qa, qb, count):
    """Piece index and parameter for coordinate value x (x must be in range)."""
    lo = 0
    hi = count
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if bp[mid] <= x:
            lo = mid
        else:
            hi = mid
    k = lo
    return k, solve_piece(qc[k], x, slo[k], shi[k], qa[k], qb[k])


@njit(cache=True)
def table_force(x, bp, qc, gc, slo, shi, qa, qb, count):
    """G(x) and dG/dx from one coordinate table."""
    k, s = locate(x, bp, qc, slo, shi, qa, qb, count)
    g = polyval(gc[k], s)
    dq = polyder_val(qc[k], s)
    dg = polyder_val(gc[k], s)
    return g, (dg / dq if dq != 0.0 else np.inf)


@njit(cache=True)
def field_force(q, K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, out):
    """out = -K q - G(q).  Returns (status, coordinate) with status OUT_OF_DOMAIN on a bound violation."""
    n = q.shape[0]
    for i in range(n):
        acc = 0.0
        for l in range(n):
            acc -= K[i, l] * q[l]
        if active[i]:
            x = q[i]
            if not (lower[i] <= x <= upper[i]):
                return OUT_OF_DOMAIN, i
            g, _ = table_force(x, bp[i], qc[i], gc[i], slo[i], shi[i], qa[i], qb[i], count[i])
            acc -= g
        out[i] = acc
    return OK, -1


@njit(cache=True)
def verlet(q0, p0, h, N, K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, Q, P, F):
    """Velocity Verlet filling Q, P, F (shape (N + 1, n)).

    Returns (status, step, coordinate); on OUT_OF_DOMAIN the arrays are valid
    up to ``step - 1`` and Q[step] holds the offending position.
    """
    n = q0.shape[0]
    q = q0.copy()
    p = p0.copy()
    acc = np.empty(n)
    status, coord = field_force(q, K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, acc)
    Q[0] = q
    P[0] = p
    F[0] = acc
    if status != OK:
        return status, 0, coord
    half = 0.5 * h
    for j in range(1, N + 1):
        for i in range(n):
            p[i] += half * acc[i]
            q[i] += h * p[i]
        Q[j] = q
        status, coord = field_force(q, K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, acc)
        if status != OK:
            return status, j, coord
        for i in range(n):
            p[i] += half * acc[i]
        P[j] = p
        F[j] = acc
    return OK, N, -1


@njit(cache=True)
def field_jacobian(q, K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, out):
    """out = -K - diag(dG/dq) at q (q assumed in domain)."""
    n = q.shape[0]
    for i in range(n):
        for l in range(n):
            out[i, l] = -K[i, l]
        if active[i]:
            _, dg = table_force(q[i], bp[i], qc[i], gc[i], slo[i], shi[i], qa[i], qb[i], count[i])
            out[i, i] -= dg


@njit(cache=True)
def verlet_tangents(Q, h, K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, J):
    """Products of one-step Verlet tangent maps along positions Q; J has shape (N + 1, 2n, 2n)."""
    N = Q.shape[0] - 1
    n = Q.shape[1]
    m = 2 * n
    Jc = np.eye(m)
    J[0] = Jc
    A0 = np.empty((n, n))
    A1 = np.empty((n, n))
    M = np.empty((m, m))
    field_jacobian(Q[0], K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, A0)
    half = 0.5 * h
    for j in range(N):
        field_jacobian(Q[j + 1], K, active, lower, upper, bp, qc, gc, slo, shi, qa, qb, count, A1)
        # kick1 . drift . kick0 with kick = [[I, 0], [h/2 A, I]], drift = [[I, hI], [0, I]]
        for r in range(n):
            for c in range(n):
                e = 1.0 if r == c else 0.0
                dq_dq = e + h * half * A0[r, c]
                M[r, c] = dq_dq
                M[r, n + c] = h * e
        for r in range(n):
            for c in range(n):
                e = 1.0 if r == c else 0.0
                acc_q = 0.0
                acc_p = 0.0
                for l in range(n):
                    acc_q += A1[r, l] * M[l, c]
                    acc_p += A1[r, l] * M[l, n + c]
                M[n + r, c] = half * A0[r, c] + half * acc_q
                M[n + r, n + c] = e + half * acc_p
        J[j + 1] = M @ Jc
        Jc = J[j + 1].copy()
        for r in range(n):
            for c in range(n):
                A0[r, c] = A1[r, c]
    return J
