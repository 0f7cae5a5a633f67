import math

import numpy as np
import pytest

from conftest import closed_form
from dissipham.errors import ConfigurationError, IntegrationError, OutOfRangeError
from dissipham.integrate import (
    Trajectory,
    default_verlet_step,
    dopri,
    integrate_conservative,
    integrate_damped,
    integrate_variational,
    verlet_tangent,
)
from dissipham.model import DampedSystem
from dissipham.substitute import ConservativeForceField

import oracles


def test_undamped_period():
    sys_ = DampedSystem.scalar(0.0, 1.0)
    traj = integrate_damped(sys_, [1.0, 0.0], 2 * math.pi)
    q, p = traj.qp(2 * math.pi)
    assert abs(q[0] - 1.0) < 1e-8 and abs(p[0]) < 1e-8


def test_damped_matches_closed_form():
    sys_ = DampedSystem.scalar(0.2, 1.0)
    traj = integrate_damped(sys_, [1.0, 0.0], 10.0)
    q, p = traj.qp(10.0)
    assert abs(q[0] - oracles.Q_AT_10) < 1e-7
    assert abs(p[0] - oracles.P_AT_10) < 1e-7


def test_uncoupled_copies_match_scalar_runs():
    s1 = DampedSystem.scalar(0.2, 1.0)
    s2 = DampedSystem(np.diag([0.2, 0.2]), np.eye(2))
    a = integrate_damped(s1, [1.0, 0.0], 10.0)
    b = integrate_damped(s2, [1.0, 1.0, 0.0, 0.0], 10.0)
    t = np.linspace(0, 10, 101)
    ya, yb = a.evaluate(t), b.evaluate(t)
    np.testing.assert_allclose(yb[:, [0, 2]], ya, atol=1e-9)
    np.testing.assert_allclose(yb[:, [1, 3]], ya, atol=1e-9)


def test_nodes_exact_and_range():
    sys_ = DampedSystem.scalar(0.2, 1.0)
    traj = integrate_damped(sys_, [1.0, 0.0], 5.0)
    assert np.all(np.diff(traj.t) > 0)
    np.testing.assert_array_equal(traj.evaluate(traj.t), traj.y)
    with pytest.raises(OutOfRangeError):
        traj.evaluate(5.1)
    with pytest.raises(OutOfRangeError):
        traj.evaluate(-0.1)


def test_dense_output_within_ten_times_nodal_error():
    sys_ = DampedSystem.scalar(0.2, 1.0)
    traj = integrate_damped(sys_, [1.0, 0.0], 60.0)
    qn, pn = closed_form(traj.t)
    nodal = max(np.abs(traj.q[:, 0] - qn).max(), np.abs(traj.p[:, 0] - pn).max())
    mids = 0.5 * (traj.t[:-1] + traj.t[1:])
    t = np.sort(np.concatenate([mids, traj.t[:-1] + 0.3 * np.diff(traj.t)]))
    q, p = traj.qp(t)
    qm, pm = closed_form(t)
    interp = max(np.abs(q[:, 0] - qm).max(), np.abs(p[:, 0] - pm).max())
    assert interp <= 10 * max(nodal, 1e-15)


def test_self_convergence():
    sys_ = DampedSystem.scalar(0.2, 1.0)
    a = integrate_damped(sys_, [1.0, 0.0], 20.0, rtol=1e-8, atol=1e-10)
    b = integrate_damped(sys_, [1.0, 0.0], 20.0, rtol=5e-9, atol=5e-11)
    assert np.abs(a.y[-1] - b.y[-1]).max() < 1e-8


def test_step_underflow_reports_last_time():
    def blowup(t, y):
        return np.array([y[0] ** 2])

    with pytest.raises(IntegrationError) as info:
        dopri(blowup, 0.0, np.array([1.0]), 2.0)
    assert 0.9 < info.value.last_t < 1.0


def test_bad_arguments():
    sys_ = DampedSystem.scalar(0.2, 1.0)
    with pytest.raises(ConfigurationError):
        integrate_damped(sys_, [1.0, 0.0], 0.0)
    with pytest.raises(ConfigurationError):
        integrate_damped(sys_, [1.0, 0.0], 1.0, rtol=0.0)


@pytest.mark.parametrize(
    "C, t, expected, tol",
    [
        (np.zeros((1, 1)), 10.0, 1.0, 1e-9),
        (np.array([[0.2]]), 5.0, oracles.DET_C02_T5, 1e-8),
        (np.diag([0.1, 0.3]), 10.0, oracles.DET_TR04_T10, 1e-7),
    ],
)
def test_variational_determinant(C, t, expected, tol):
    sys_ = DampedSystem(C, np.eye(C.shape[0]))
    series = integrate_variational(sys_, np.r_[np.ones(sys_.n), np.zeros(sys_.n)], t)
    np.testing.assert_array_equal(series.at(0), np.eye(2 * sys_.n))
    assert abs(series.determinants()[-1] - expected) <= tol * expected


def test_verlet_harmonic_return():
    traj = integrate_conservative(ConservativeForceField.linear([[1.0]]), [1.0, 0.0], 2 * math.pi, 1e-3)
    assert np.abs(traj.y[-1] - [1.0, 0.0]).max() < 1e-6
    assert traj.t[-1] == 2 * math.pi


def test_verlet_free_particle():
    traj = integrate_conservative(ConservativeForceField.linear([[0.0]]), [0.0, 1.0], 1.0, 0.01)
    assert traj.y[-1] == pytest.approx([1.0, 1.0], abs=1e-14)


def test_verlet_energy_error_is_second_order_and_bounded():
    force = ConservativeForceField.linear([[1.0]])
    drifts = []
    for h in (0.02, 0.01):
        traj = integrate_conservative(force, [1.0, 0.0], 200 * math.pi, h)
        H = 0.5 * (traj.q[:, 0] ** 2 + traj.p[:, 0] ** 2)
        err = np.abs(H - 0.5)
        # non-secular: the last period is no worse than the first
        per = int(round(2 * math.pi / h))
        assert err[-per:].max() <= 1.01 * err[:per].max()
        drifts.append(err.max())
    assert drifts[0] / drifts[1] == pytest.approx(4.0, rel=0.05)


def test_verlet_tangent_is_symplectic():
    force = ConservativeForceField.linear(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    M = verlet_tangent(force, np.array([0.3, -0.2]), np.array([0.1, 0.4]), 0.05)
    J = np.block([[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]])
    np.testing.assert_allclose(M.T @ J @ M, J, atol=1e-14)
    assert abs(np.linalg.det(M) - 1.0) < 1e-14


def test_default_verlet_step():
    assert default_verlet_step(ConservativeForceField.linear([[4.0]])) == pytest.approx(math.pi / 1000)
    with pytest.raises(ConfigurationError):
        default_verlet_step(ConservativeForceField.linear([[0.0]]))


def test_python_path_matches_kernel():
    class Plain:
        K = np.array([[1.0]])

        def force(self, q):
            return -q

    a = integrate_conservative(Plain(), [1.0, 0.0], 1.0, 1e-2)
    b = integrate_conservative(ConservativeForceField.linear([[1.0]]), [1.0, 0.0], 1.0, 1e-2)
    np.testing.assert_array_equal(a.y, b.y)
    assert isinstance(a, Trajectory)
