"""Damped linear mechanical systems  q'' + C q' + K q = 0  with unit masses.

Phase-space form: q' = p, p' = -K q - C p.  The mechanical energy is
H = p.p/2 + q.K.q/2 and it decays at the rate p.C.p.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


def _as_matrix(name, value, n=None):
    arr = np.array(value, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ConfigurationError(f"{name} must be a square matrix, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise ConfigurationError(f"{name} must be {n}x{n}, got {arr.shape[0]}x{arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DampedSystem:
    """Matrices of  q'' + C q' + K q = 0.

    With ``physical=True`` the stiffness must be symmetric positive
    semi-definite; pathological systems are constructible with it off.
    """

    C: np.ndarray
    K: np.ndarray
    physical: bool = False
    n: int = field(init=False)

    def __post_init__(self):
        K = _as_matrix("K", self.K)
        n = K.shape[0]
        if n < 1:
            raise ConfigurationError("system needs at least one degree of freedom")
        C = _as_matrix("C", self.C, n)
        if self.physical:
            if not np.allclose(K, K.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(K).max())):
                raise ConfigurationError("K must be symmetric for a physical system")
            if np.linalg.eigvalsh(0.5 * (K + K.T)).min() < -1e-12 * max(1.0, np.abs(K).max()):
                raise ConfigurationError("K must be positive semi-definite for a physical system")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "n", n)

    @classmethod
    def scalar(cls, c: float, k: float, **kw) -> "DampedSystem":
        return cls(C=[[c]], K=[[k]], **kw)

    def system_matrix(self) -> np.ndarray:
        """The 2n x 2n matrix A with y' = A y for y = (q, p)."""
        n = self.n
        A = np.zeros((2 * n, 2 * n))
        A[:n, n:] = np.eye(n)
        A[n:, :n] = -self.K
        A[n:, n:] = -self.C
        return A

    def max_frequency(self) -> float:
        """Spectral radius of the phase-space matrix (fastest rate in the flow)."""
        return float(np.abs(np.linalg.eigvals(self.system_matrix())).max())

    def split(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != 2 * self.n:
            raise ConfigurationError(f"state has length {y.shape[-1]}, expected {2 * self.n}")
        return y[..., : self.n], y[..., self.n :]


@dataclass(frozen=True)
class PhaseState:
    q: np.ndarray
    p: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if q.ndim != 1 or q.shape != p.shape:
            raise ConfigurationError(f"q and p must be vectors of equal length, got {q.shape} and {p.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p)) and np.isfinite(self.t)):
            raise ConfigurationError("phase state has non-finite entries")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "t", float(self.t))

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])


def initial_condition(a, n: int | None = None) -> np.ndarray:
    """Validate a = (q0, q0') and return it as a float vector of length 2n."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.ndim != 1 or a.size % 2:
        raise ConfigurationError(f"initial condition must have even length, got shape {a.shape}")
    if n is not None and a.size != 2 * n:
        raise ConfigurationError(f"initial condition has length {a.size}, expected {2 * n}")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError("initial condition has non-finite entries")
    return a


def _check(sys: DampedSystem, s: PhaseState):
    if s.q.size != sys.n:
        raise ConfigurationError(f"state has {s.q.size} coordinates, system has {sys.n}")


def damped_rhs(sys: DampedSystem, s: PhaseState) -> np.ndarray:
    """(q', p') = (p, -K q - C p)."""
    _check(sys, s)
    return np.concatenate([s.p, -sys.K @ s.q - sys.C @ s.p])


def mechanical_energy(sys: DampedSystem, s: PhaseState) -> float:
    _check(sys, s)
    return 0.5 * float(s.p @ s.p) + 0.5 * float(s.q @ sys.K @ s.q)


def dissipated_power(sys: DampedSystem, s: PhaseState) -> float:
    """p.C.p, the rate at which the damping removes mechanical energy."""
    _check(sys, s)
    return float(s.p @ sys.C @ s.p)


def energy_array(sys: DampedSystem, q, p) -> np.ndarray:
    """Vectorised mechanical energy for stacked states of shape (..., n)."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    return 0.5 * np.einsum("...i,...i->...", p, p) + 0.5 * np.einsum("...i,ij,...j->...", q, sys.K, q)
