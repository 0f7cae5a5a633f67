"""The ten acceptance criteria at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary, or directly with ``python tests/test_acceptance.py``.
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from dissipham import cli
from dissipham import ensemble as E
from dissipham import verify as V
from dissipham.integrate import integrate_conservative, integrate_damped, integrate_variational
from dissipham.model import DampedSystem, energy_array
from dissipham.substitute import build_substituting_system

RESULTS: dict[int, str] = {}
TITLES = {
    1: "H^ constancy",
    2: "phase-curve coincidence",
    3: "zero-damping identity",
    4: "volume dichotomy",
    5: "bracket algebra",
    6: "functional Hamilton equations",
    7: "delta K^ conservation",
    8: "Euler-Lagrange residual and action",
    9: "energy-balance oracle",
    10: "determinism",
}

DAMPED = DampedSystem.scalar(0.2, 1.0)


def record(num, ok, summary):
    RESULTS[num] = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} {TITLES[num]}: {summary}"
    print(RESULTS[num])
    assert ok, RESULTS[num]


@pytest.fixture(scope="module")
def damped_sub():
    traj = integrate_damped(DAMPED, [1.0, 0.0], 60.0, rtol=1e-10)
    return build_substituting_system(traj, DAMPED)


@pytest.fixture(scope="module")
def grid_field():
    grid = E.build_grid(E.DomainSpec((0.5, -0.5), (1.5, 0.5), (2, 2)))
    return E.evolve_ensemble(DAMPED, grid, 60.0, n_times=601)


def test_criterion_01_hatH_constancy():
    start = time.perf_counter()
    traj = integrate_damped(DAMPED, [1.0, 0.0], 60.0, rtol=1e-10)
    sub = build_substituting_system(traj, DAMPED)
    t = np.unique(np.r_[traj.t, np.linspace(0.0, 60.0, 6001)])
    dev = float(np.abs(sub.hat_H(t) - 0.5).max())
    elapsed = time.perf_counter() - start
    record(1, dev <= 1e-8 and elapsed < 1.0, f"max|H^ - 0.5| = {dev:.3e} (<= 1e-8), runtime {elapsed:.2f} s (< 1 s)")


def test_criterion_02_phase_coincidence(damped_sub):
    coarse = V.phase_coincidence_all(DAMPED, damped_sub, h=1e-4)
    fine = V.phase_coincidence_all(DAMPED, damped_sub, h=5e-5)
    worst = max(e.residual for e in coarse)
    ratios = [a.residual / b.residual for a, b in zip(coarse, fine)]
    ok = worst <= 1e-6 and min(ratios) >= 3.0
    record(
        2,
        ok,
        f"{len(coarse)} segments, max residual {worst:.3e} (<= 1e-6) at h = 1e-4, min halving ratio {min(ratios):.2f} (>= 3)",
    )


def test_criterion_03_zero_damping_identity():
    sys0 = DampedSystem.scalar(0.0, 1.0)
    t_end = 20 * math.pi
    traj = integrate_damped(sys0, [1.0, 0.0], t_end)
    sub = build_substituting_system(traj, sys0)
    t = np.linspace(0.0, t_end, 4001)
    w_max = float(np.abs(sub.work(t)).max())
    identity = bool(np.all(sub.hat_H(t) == sub.energy(t)))
    field_ = sub.force_field(sub.selection_at(0.0))
    probe = np.linspace(-5, 5, 101)
    g_max = max(abs(field_.force(np.array([x]))[0] + x) for x in probe)
    ct = integrate_conservative(field_, [1.0, 0.0], t_end, 2e-5)
    dist = float(np.linalg.norm(ct.y - traj.evaluate(ct.t), axis=1).max())
    ok = w_max == 0.0 and identity and g_max == 0.0 and dist <= 1e-8
    record(3, ok, f"G = 0 and W = 0 exactly, H^ == H, Verlet (h = 2e-5) vs RK over 10 periods {dist:.3e} (<= 1e-8)")


def test_criterion_04_volume_dichotomy(damped_sub):
    rel = []
    for C in (np.array([[0.2]]), np.diag([0.1, 0.3])):
        sys_ = DampedSystem(C, np.eye(C.shape[0]))
        a = np.r_[np.ones(sys_.n), np.zeros(sys_.n)]
        det = integrate_variational(sys_, a, 10.0).determinants()[-1]
        expected = math.exp(-np.trace(C) * 10.0)
        rel.append(abs(det - expected) / expected)
    seg = damped_sub.segments[0][0]
    cons = V.check_conservative_volume(damped_sub, seg).residual
    step = V.check_verlet_symplectic(damped_sub, seg).residual
    ok = max(rel) <= 1e-7 and cons <= 1e-6 and step <= 1e-14
    record(
        4,
        ok,
        f"damped rel err {rel[0]:.2e}/{rel[1]:.2e} (<= 1e-7), segment |det-1| {cons:.2e} (<= 1e-6), "
        f"one step {step:.1e} (<= 1e-14)",
    )


def _random_quadratic(rng, m):
    A = rng.normal(size=(m, m))
    A = A + A.T
    b = rng.normal(size=m)
    return E.DiscreteFunctional(
        evaluate=lambda q, pi: b @ np.r_[q.ravel(), pi.ravel()]
        + 0.5 * np.r_[q.ravel(), pi.ravel()] @ A @ np.r_[q.ravel(), pi.ravel()]
    )


def test_criterion_05_bracket_algebra(grid_field):
    t = 5.0
    w = grid_field.weights
    canon = 0.0
    for k in range(4):
        for m in range(4):
            b = E.poisson_bracket(E.evaluation_functional("q", k, 0), E.evaluation_functional("pi", m, 0), grid_field, t)
            canon = max(canon, abs(b - (1.0 / w[k] if k == m else 0.0)))
    q, pi = grid_field.values(t)
    rng = np.random.default_rng(20261016)
    anti = 0.0
    for _ in range(100):
        F, G = _random_quadratic(rng, 8), _random_quadratic(rng, 8)
        anti = max(anti, abs(E.bracket_values(F, G, q, pi, w) + E.bracket_values(G, F, q, pi, w)))
    K = E.khat_functional(grid_field, t)
    kk = abs(E.poisson_bracket(K, K, grid_field, t))
    ok = canon <= 1e-9 and anti <= 1e-12 and kk <= 1e-12
    record(5, ok, f"canonical {canon:.1e} (<= 1e-9), antisymmetry {anti:.1e} (<= 1e-12), {{K^,K^}} {kk:.1e} (<= 1e-12)")


def test_criterion_06_hamilton_equations(grid_field):
    worst, checked, excluded = 0.0, 0, 0
    for t in grid_field.times:
        r = E.hamilton_residual(grid_field, float(t))
        worst = max(worst, r.max)
        excluded += len(r.excluded)
        checked += grid_field.size - len(r.excluded)
    ok = worst <= 1e-5 and checked > 0
    record(6, ok, f"max residual {worst:.3e} (<= 1e-5) over {checked} node-times, {excluded} in turning-point bands")


def test_criterion_07_deltaK(grid_field):
    drift = E.check_deltaK_conserved(grid_field)
    record(7, drift <= 1e-8, f"relative drift {drift:.3e} (<= 1e-8) over [0, 60]")


def test_criterion_08_euler_lagrange(grid_field):
    res = E.action_and_EL_residual(grid_field)
    undamped = E.evolve_ensemble(DampedSystem.scalar(0.0, 1.0), E.single_node_grid([1.0, 0.0]), 2 * math.pi, n_times=201)
    S = E.action_and_EL_residual(undamped).action
    ok = res.el_residual <= 1e-6 and abs(S) <= 1e-6
    record(8, ok, f"EL residual {res.el_residual:.3e} (<= 1e-6), undamped one-period action {S:.3e} (|S| <= 1e-6)")


def test_criterion_09_energy_balance():
    worst, runs = 0.0, 0
    for name in cli.bundled_scenarios():
        cfg = cli.load_config(name)
        starts = list(cfg.initial)
        if cfg.domain is not None:
            starts += [list(a) for a in E.build_grid(cfg.domain).nodes]
        for a in starts:
            traj = integrate_damped(cfg.system, a, cfg.t_end, cfg.rtol, cfg.atol)
            sub = build_substituting_system(traj, cfg.system)
            t = np.unique(np.r_[traj.t, np.linspace(traj.t0, traj.t_end, 6001)])
            q, p = traj.qp(t)
            H = energy_array(cfg.system, q, p)
            worst = max(worst, float(np.abs(sub.work(t) - (H[0] - H)).max()))
            runs += 1
    record(9, worst <= 1e-9, f"max |W - (H(0) - H)| = {worst:.3e} (<= 1e-9) over {runs} trajectories")


def test_criterion_10_determinism(tmp_path):
    reports = []
    for d in ("a", "b"):
        out = tmp_path / d
        proc = subprocess.run(
            [sys.executable, "-m", "dissipham.cli", "verify", "--config", "damped1dof.cfg", "--out", str(out)],
            capture_output=True,
            env={**os.environ, "PYTHONHASHSEED": "random"},
        )
        assert proc.returncode == 0, proc.stderr.decode()
        reports.append(((out / "report.json").read_bytes(), (out / "report.txt").read_bytes()))
    same = reports[0] == reports[1]
    record(10, same, f"two verify runs on damped1dof.cfg: report.json and report.txt byte-identical = {same}")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
