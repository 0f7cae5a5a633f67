"""Substituting conservative systems for damped linear oscillators.

A damped system q'' + C q' + K q = 0 shares one phase curve with a
conservative system whose extra force G_i(q_i) is the damping force read
off along that curve.  The package integrates the damped flow, builds the
per-segment force tables and work potential, verifies the shared curve
numerically, and discretizes the ensemble (functional) Hamiltonian form.
"""

from .errors import ConfigurationError, ForceDomainError, IntegrationError, OutOfRangeError
from .integrate import (
    Trajectory,
    integrate_conservative,
    integrate_damped,
    integrate_variational,
)
from .model import DampedSystem, PhaseState, damped_rhs, dissipated_power, mechanical_energy
from .substitute import (
    ConservativeForceField,
    MonotoneSegment,
    SubstitutingSystem,
    build_substituting_system,
    segment_trajectory,
    work_along,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ConservativeForceField",
    "DampedSystem",
    "ForceDomainError",
    "IntegrationError",
    "MonotoneSegment",
    "OutOfRangeError",
    "PhaseState",
    "SubstitutingSystem",
    "Trajectory",
    "build_substituting_system",
    "damped_rhs",
    "dissipated_power",
    "integrate_conservative",
    "integrate_damped",
    "integrate_variational",
    "mechanical_energy",
    "segment_trajectory",
    "work_along",
]
