"""Ensemble of damped trajectories labelled by their initial conditions.

Each label a = (q0, q0') in a box D is a "particle" carrying fields q(a, t)
and pi(a, t) = q'(a, t).  Integrals over D become midpoint-rule sums
sum_k w_k (...), and functional derivatives are weight-normalised partial
derivatives, so that  d u(a_m) / d u(a_k) = delta_km / w_k  holds exactly.
The Hamiltonian functional is  K^ = sum_k w_k H^(a_k, t), with H^ the
Hamiltonian of each node's own substituting conservative system.
"""

from __future__ import annotations

import itertools
import math
import os
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ForceDomainError, IntegrationError, OutOfRangeError
from .integrate import DEFAULT_ATOL, DEFAULT_RTOL, integrate_damped
from .model import DampedSystem
from .substitute import SubstitutingSystem, build_substituting_system

MAX_NODES = 4096
FD_RELATIVE_STEP = 1e-6
SLOTS = ("q", "pi")


@dataclass(frozen=True)
class DomainSpec:
    """Box of initial conditions: one interval and node count per axis of a."""

    lower: tuple
    upper: tuple
    nodes: tuple
    rule: str = "midpoint"

    def __post_init__(self):
        lower = tuple(float(x) for x in self.lower)
        upper = tuple(float(x) for x in self.upper)
        nodes = tuple(int(x) for x in self.nodes)
        if not (len(lower) == len(upper) == len(nodes)) or len(lower) % 2:
            raise ConfigurationError("domain needs matching lower/upper/nodes of even length 2n")
        if any(not (math.isfinite(lo) and math.isfinite(hi)) for lo, hi in zip(lower, upper)):
            raise ConfigurationError("domain bounds must be finite")
        if any(n < 1 for n in nodes):
            raise ConfigurationError("node counts must be at least 1")
        if self.rule != "midpoint":
            raise ConfigurationError(f"unknown quadrature rule {self.rule!r}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nodes", nodes)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return math.prod(hi - lo for lo, hi in zip(self.lower, self.upper))


@dataclass(frozen=True)
class QuadratureGrid:
    nodes: np.ndarray  # (N, 2n)
    weights: np.ndarray  # (N,)

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def n(self) -> int:
        return self.nodes.shape[1] // 2


def build_grid(spec: DomainSpec, max_nodes: int = MAX_NODES) -> QuadratureGrid:
    """Tensor-product midpoint rule; the first axis varies slowest."""
    lengths = [hi - lo for lo, hi in zip(spec.lower, spec.upper)]
    if any(not L > 0 for L in lengths):
        raise ConfigurationError("domain has zero volume (every interval must satisfy lower < upper)")
    total = math.prod(spec.nodes)
    if total > max_nodes:
        raise ConfigurationError(f"grid has {total} nodes, cap is {max_nodes}")
    axes = [lo + (np.arange(m) + 0.5) * (L / m) for lo, L, m in zip(spec.lower, lengths, spec.nodes)]
    nodes = np.array(list(itertools.product(*axes)), dtype=float).reshape(total, spec.dim)
    w = math.prod(L / m for L, m in zip(lengths, spec.nodes))
    return QuadratureGrid(nodes=nodes, weights=np.full(total, w))


def single_node_grid(a, weight=1.0) -> QuadratureGrid:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return QuadratureGrid(nodes=a, weights=np.array([float(weight)]))


# --- ensemble field ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EnsembleField:
    """Per-node trajectories and substituting systems, sampled on a shared time grid."""

    system: DampedSystem
    grid: QuadratureGrid
    times: np.ndarray
    subs: tuple[SubstitutingSystem, ...]
    q: np.ndarray  # (N, T, n)
    pi: np.ndarray  # (N, T, n)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def weights(self) -> np.ndarray:
        return self.grid.weights

    def values(self, t):
        """Field values (q, pi) at time t, each of shape (N, n)."""
        ys = np.array([s.trajectory.evaluate(t) for s in self.subs])
        return ys[:, : self.n], ys[:, self.n :]

    def with_weights(self, weights) -> "EnsembleField":
        grid = QuadratureGrid(nodes=self.grid.nodes, weights=np.asarray(weights, dtype=float))
        return EnsembleField(self.system, grid, self.times, self.subs, self.q, self.pi)


def _workers(requested):
    cap = os.environ.get("DISSIPHAM_THREADS")
    n = requested if requested is not None else (int(cap) if cap else 1)
    if cap:
        n = min(n, int(cap))
    return max(1, n)


def evolve_ensemble(
    sys: DampedSystem,
    grid: QuadratureGrid,
    t_end: float,
    rtol=DEFAULT_RTOL,
    atol=DEFAULT_ATOL,
    n_times: int = 601,
    workers: int | None = None,
) -> EnsembleField:
    """Integrate every node on its own damped curve and build its substituting system."""
    if grid.size == 0:
        raise ConfigurationError("grid has no nodes")
    if grid.n != sys.n:
        raise ConfigurationError(f"grid labels have dimension {2 * grid.n}, system needs {2 * sys.n}")

    def one(k):
        try:
            traj = integrate_damped(sys, grid.nodes[k], t_end, rtol, atol)
        except IntegrationError as exc:
            raise IntegrationError(f"node {k}: {exc}", exc.last_t) from exc
        return build_substituting_system(traj, sys)

    nw = _workers(workers)
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as ex:
            subs = tuple(ex.map(one, range(grid.size)))
    else:
        subs = tuple(one(k) for k in range(grid.size))
    times = np.linspace(0.0, float(t_end), n_times)
    ys = np.array([s.trajectory.evaluate(times) for s in subs])
    return EnsembleField(sys, grid, times, subs, ys[..., : sys.n], ys[..., sys.n :])


def functional_K(field: EnsembleField, t) -> float:
    """K^(t) = sum_k w_k H^(a_k, t)."""
    values = np.array([s.hat_H(t) for s in field.subs])
    return float(field.weights @ values) if np.ndim(t) == 0 else field.weights @ values


# --- functionals and their derivatives ---------------------------------------------


@dataclass(frozen=True)
class DiscreteFunctional:
    """Scalar function of the field values (q, pi), each of shape (N, n).

    ``depends`` lists the (slot, node, component) triples the value can
    change with (None: all of them).  ``local`` optionally gives the
    per-node summand for functionals of the form sum_k f_k(q_k, pi_k); it is
    used for cheaper and better-conditioned derivatives.
    """

    evaluate: Callable
    depends: frozenset | None = None
    local: Callable | None = None
    name: str = ""

    def __call__(self, q, pi) -> float:
        return float(self.evaluate(q, pi))

    def depends_on(self, which, k, i) -> bool:
        return self.depends is None or (which, k, i) in self.depends


def evaluation_functional(which: str, k: int, i: int) -> DiscreteFunctional:
    """F = u_i(a_k) for u = q or pi."""
    if which not in SLOTS:
        raise ConfigurationError(f"slot must be 'q' or 'pi', got {which!r}")
    slot = 0 if which == "q" else 1
    return DiscreteFunctional(
        evaluate=lambda q, pi: (q, pi)[slot][k, i],
        depends=frozenset({(which, k, i)}),
        name=f"{which}_{i + 1}(a_{k})",
    )


def khat_functional(field: EnsembleField, t: float) -> DiscreteFunctional:
    """K^ as a functional of (q, pi), with each node's potential from the segments holding t."""
    sys = field.system
    fields = []
    consts = []
    for sub in field.subs:
        selector = sub.selection_at(t)
        ff = sub.force_field(selector)
        fields.append(ff)
        # coordinates without a force table still carry their accumulated work
        w = sub.work_components(t)
        consts.append(sum(w[i] for i in range(sys.n) if ff.segments[i] is None))
    weights = field.weights

    def local(k, qk, pk):
        return weights[k] * (0.5 * float(pk @ pk) + fields[k].potential(qk) + consts[k])

    def evaluate(q, pi):
        return sum(local(k, q[k], pi[k]) for k in range(weights.size))

    return DiscreteFunctional(evaluate=evaluate, local=local, name="K^")


def _fd_step(u):
    return FD_RELATIVE_STEP * max(1.0, abs(u))


def slot_derivative(F: DiscreteFunctional, q, pi, weights, which, k, i) -> float:
    """(1/w_k) dF/du_i(a_k) by central differences.

    The divisor is the representable difference of the two perturbed
    values, which makes the derivative of a linear functional exact.  A
    perturbation that leaves a force table (a node sitting on a turning
    point) falls back to a one-sided difference.
    """
    if not F.depends_on(which, k, i):
        return 0.0
    u = (q if which == "q" else pi)[k, i]
    eta = _fd_step(u)
    if F.local is not None:
        qk, pk = q[k].copy(), pi[k].copy()
        target = qk if which == "q" else pk

        def value(x):
            target[i] = x
            return F.local(k, qk, pk)
    else:
        qq, pp = q.copy(), pi.copy()
        target = qq if which == "q" else pp

        def value(x):
            target[k, i] = x
            return F(qq, pp)

    up, um = u + eta, u - eta
    try:
        fp = value(up)
    except ForceDomainError:
        up, fp = u, value(u)
    try:
        fm = value(um)
    except ForceDomainError:
        um, fm = u, value(u)
    return (fp - fm) / (up - um) / weights[k]


def functional_derivative(F: DiscreteFunctional, field: EnsembleField, which: str, k: int, i: int, t: float) -> float:
    if which not in SLOTS:
        raise ConfigurationError(f"slot must be 'q' or 'pi', got {which!r}")
    q, pi = field.values(t)
    return slot_derivative(F, q, pi, field.weights, which, k, i)


def _slots(F, G, N, n):
    """Slots (node, component) either functional depends on, in fixed order."""
    if F.depends is None or G.depends is None:
        return [(k, i) for k in range(N) for i in range(n)]
    used = {(k, i) for (_, k, i) in F.depends | G.depends}
    return sorted(used)


def bracket_values(F, G, q, pi, weights) -> float:
    """{F, G} = sum_k w_k sum_i [dF/dq dG/dpi - dG/dq dF/dpi] at given field values.

    Slots neither functional depends on contribute exactly zero and are skipped.
    """
    total = 0.0
    for k, i in _slots(F, G, *q.shape):
        fq = slot_derivative(F, q, pi, weights, "q", k, i)
        fp = slot_derivative(F, q, pi, weights, "pi", k, i)
        gq = slot_derivative(G, q, pi, weights, "q", k, i)
        gp = slot_derivative(G, q, pi, weights, "pi", k, i)
        total += weights[k] * (fq * gp - gq * fp)
    return total


def poisson_bracket(F: DiscreteFunctional, G: DiscreteFunctional, field: EnsembleField, t: float) -> float:
    q, pi = field.values(t)
    return bracket_values(F, G, q, pi, field.weights)


# --- Hamilton's equations, action, conservation ----------------------------------------


def _in_band(sub: SubstitutingSystem, t: float, band_fraction: float) -> bool:
    """True when t lies within band_fraction of a segment duration from a turning point."""
    for i in range(sub.n):
        if not np.any(sub.system.C[i] != 0.0):
            continue
        seg = sub.segment_at(i, t)
        if seg.frozen:
            continue
        margin = band_fraction * seg.duration
        if t < seg.t_a + margin or t > seg.t_b - margin:
            return True
    return False


@dataclass(frozen=True)
class HamiltonResidual:
    t: float
    q_residual: np.ndarray  # per node, NaN where excluded
    pi_residual: np.ndarray
    excluded: tuple
    route: str
    one_sided: bool = False

    @property
    def max(self) -> float:
        vals = np.concatenate([self.q_residual, self.pi_residual])
        vals = vals[np.isfinite(vals)]
        return float(vals.max()) if vals.size else 0.0


def _time_derivatives(field: EnsembleField, t, route):
    if route == "rhs":
        q, pi = field.values(t)
        A = field.system.system_matrix()
        y = np.hstack([q, pi]) @ A.T
        return y[:, : field.n], y[:, field.n :], False
    if route == "fd":
        dt = float(field.times[1] - field.times[0])
        lo, hi = field.times[0], field.times[-1]
        one_sided = t - dt < lo or t + dt > hi
        ta, tb = max(lo, t - dt), min(hi, t + dt)
        qa, pa = field.values(ta)
        qb, pb = field.values(tb)
        return (qb - qa) / (tb - ta), (pb - pa) / (tb - ta), one_sided
    raise ConfigurationError(f"unknown route {route!r}")


def hamilton_residual(field: EnsembleField, t: float, band_fraction: float = 0.01, route: str = "rhs") -> HamiltonResidual:
    """Per-node |q' - {q, K^}| and |pi' - {pi, K^}|.

    Nodes whose time t lies in a turning-point band are excluded (NaN).
    ``route="rhs"`` takes q', pi' from the damped vector field; ``"fd"`` uses
    central differences on the stored time grid (one-sided at its ends, flagged).
    """
    K = khat_functional(field, t)
    q, pi = field.values(t)
    qdot, pdot, one_sided = _time_derivatives(field, t, route)
    N, n = q.shape
    rq = np.full(N, np.nan)
    rp = np.full(N, np.nan)
    excluded = []
    for k in range(N):
        if _in_band(field.subs[k], t, band_fraction):
            excluded.append(k)
            continue
        eq = ep = 0.0
        for i in range(n):
            bq = bracket_values(evaluation_functional("q", k, i), K, q, pi, field.weights)
            bp = bracket_values(evaluation_functional("pi", k, i), K, q, pi, field.weights)
            eq = max(eq, abs(qdot[k, i] - bq))
            ep = max(ep, abs(pdot[k, i] - bp))
        rq[k], rp[k] = eq, ep
    return HamiltonResidual(t, rq, rp, tuple(excluded), route, one_sided)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _time_integral(fn, breaks):
    """Gauss-Legendre on every interval between consecutive break points."""
    a, b = breaks[:-1], breaks[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    t = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    vals = fn(t).reshape(a.size, _GL_X.size)
    return float(np.sum(half * (vals @ _GL_W)))


@dataclass(frozen=True)
class ActionResult:
    action: float
    el_residual: float
    excluded_bands: tuple  # (node, coord, t_lo, t_hi)
    samples: int


def action_and_EL_residual(field: EnsembleField, t_span=None, band_fraction: float = 0.01, samples: int | None = None) -> ActionResult:
    """Action S = sum_k w_k int L^ dt and the Euler-Lagrange residual max |q'' + Kq + G(q)|.

    The residual is sampled away from turning points; the excluded bands
    are returned.  ``samples`` defaults to the field's time grid.
    """
    t0, t1 = (field.times[0], field.times[-1]) if t_span is None else t_span
    if not (field.times[0] <= t0 < t1 <= field.times[-1]):
        raise OutOfRangeError(f"span ({t0!r}, {t1!r}) outside the field's time range")
    sys = field.system
    ts = np.linspace(t0, t1, samples) if samples else field.times[(field.times >= t0) & (field.times <= t1)]
    S = 0.0
    worst = 0.0
    bands = []
    for k, sub in enumerate(field.subs):
        traj = sub.trajectory
        breaks = np.unique(np.concatenate([[t0, t1], traj.t[(traj.t > t0) & (traj.t < t1)]]))
        S += field.weights[k] * _time_integral(sub.hat_L, breaks)
        for i in range(sys.n):
            if not np.any(sys.C[i] != 0.0):
                continue
            for seg in sub.segments[i]:
                if seg.frozen or seg.t_b < t0 or seg.t_a > t1:
                    continue
                m = band_fraction * seg.duration
                bands.append((k, i, seg.t_a, seg.t_a + m))
                bands.append((k, i, seg.t_b - m, seg.t_b))
        # q'' from the derivative of the interpolant, not from the vector field
        q = traj.evaluate(ts)[:, : sys.n]
        qdd = traj.derivative(ts)[:, sys.n :]
        Kq = q @ sys.K.T
        for j, t in enumerate(ts):
            for i in range(sys.n):
                g = 0.0
                if np.any(sys.C[i] != 0.0):
                    seg = sub.segment_at(i, t)
                    if not seg.frozen:
                        m = band_fraction * seg.duration
                        if t < seg.t_a + m or t > seg.t_b - m:
                            continue
                        try:
                            g = seg.force(q[j, i])
                        except ForceDomainError:
                            continue
                worst = max(worst, abs(qdd[j, i] + Kq[j, i] + g))
    return ActionResult(float(S), float(worst), tuple(bands), int(ts.size))


def check_deltaK_conserved(field: EnsembleField) -> float:
    """max_t |K^(t) - K^(t_0)| / max(1, |K^(t_0)|) over the field's time grid."""
    if field.times.size < 2:
        raise ConfigurationError("field needs at least two times")
    K = functional_K(field, field.times)
    return float(np.max(np.abs(K - K[0])) / max(1.0, abs(K[0])))
