"""Command-line driver: scenario configs in, CSV and report files out.

Config files are INI (stdlib configparser); array values are JSON.  Example::

    [scenario]
    name = damped1dof
    t_end = 60

    [system]
    n = 1
    C = [[0.2]]
    K = [[1.0]]

    [initial]
    a = [1.0, 0.0]

    [tolerances]
    rtol = 1e-10
    hatH_constancy = 1e-8

    [domain]
    lower = [0.5, -0.5]
    upper = [1.5, 0.5]
    nodes = [2, 2]

Exit status: 0 all selected checks pass, 1 some check fails, 2 bad config
or arguments, 3 integration failure (partial report written).
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import re
import sys
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import ensemble as ens
from . import verify as ver
from .errors import ConfigurationError, ForceDomainError, IntegrationError
from .integrate import DEFAULT_ATOL, DEFAULT_RTOL, integrate_damped
from .model import DampedSystem, energy_array
from .substitute import build_substituting_system

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INTEGRATION = 0, 1, 2, 3

ENSEMBLE_TOLERANCES = {
    "canonical_bracket": 1e-9,
    "hamilton_equations": 1e-5,
    "deltaK_conserved": 1e-8,
    "euler_lagrange": 1e-6,
}
SINGLE_CHECKS = (
    "gradient_match",
    "phase_coincidence",
    "hatH_constancy",
    "volume_contraction",
    "conservative_volume",
    "verlet_symplectic",
    "energy_balance",
    "consistency",
)
ENSEMBLE_CHECKS = tuple(ENSEMBLE_TOLERANCES)
ALL_CHECKS = SINGLE_CHECKS + ENSEMBLE_CHECKS
SOLVER_KEYS = ("rtol", "atol", "verlet_step")


# --- configuration --------------------------------------------------------------


@dataclass
class ScenarioConfig:
    name: str
    system: DampedSystem
    initial: list  # one or more initial conditions of length 2n
    t_end: float
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    verlet_step: float = ver.DEFAULT_VERLET_STEP
    volume_t_end: float | None = None
    tolerances: dict = field(default_factory=dict)
    domain: ens.DomainSpec | None = None
    ensemble_t_end: float | None = None
    ensemble_times: int = 601
    samples: int = 601
    out_dir: str | None = None
    checks: tuple = ALL_CHECKS

    def tolerance(self, name):
        if name in self.tolerances:
            return self.tolerances[name]
        return ver.DEFAULT_TOLERANCES.get(name, ENSEMBLE_TOLERANCES.get(name))

    def scenario_ids(self):
        if len(self.initial) == 1:
            return [self.name]
        return [f"{self.name}[{k}]" for k in range(len(self.initial))]


def _line_of(text, section, key=None):
    """1-based line of a section header or of a key inside it (None if absent)."""
    current = None
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return num
            continue
        if key is not None and current == section:
            m = re.match(r"([^=:]+?)\s*[=:]", line)
            if m and m.group(1).strip().lower() == key.lower():
                return num
    return None


class _Reader:
    def __init__(self, parser, text):
        self.parser = parser
        self.text = text

    def error(self, msg, section, key=None, path=None):
        where = path or (f"{section}.{key}" if key else section)
        return ConfigurationError(msg, field=where, line=_line_of(self.text, section, key))

    def has(self, section, key):
        return self.parser.has_option(section, key)

    def raw(self, section, key):
        return self.parser.get(section, key)

    def number(self, section, key, default=None, positive=False, integer=False):
        if not self.has(section, key):
            if default is None:
                raise self.error("missing value", section, key)
            return default
        text = self.raw(section, key)
        try:
            value = int(text) if integer else float(text)
        except ValueError:
            raise self.error(f"expected {'an integer' if integer else 'a number'}, got {text!r}", section, key) from None
        if not math.isfinite(value):
            raise self.error("value must be finite", section, key)
        if positive and not value > 0:
            raise self.error("value must be positive", section, key)
        return value

    def array(self, section, key, default=None):
        if not self.has(section, key):
            if default is None:
                raise self.error("missing value", section, key)
            return default
        try:
            return json.loads(self.raw(section, key))
        except json.JSONDecodeError as exc:
            raise self.error(f"invalid JSON array: {exc.msg}", section, key) from None

    def vector(self, section, key, length=None, default=None):
        v = self.array(section, key, default)
        if not isinstance(v, list):
            raise self.error("expected a list of numbers", section, key)
        for j, x in enumerate(v):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                raise self.error(f"expected a finite number, got {x!r}", section, key, f"{section}.{key}[{j}]")
        if length is not None and len(v) != length:
            raise self.error(f"expected {length} entries, got {len(v)}", section, key)
        return [float(x) for x in v]

    def matrix(self, section, key, n):
        m = self.array(section, key)
        if not isinstance(m, list) or len(m) != n:
            raise self.error(f"expected {n} rows", section, key)
        rows = []
        for r, row in enumerate(m):
            path = f"{section}.{key}[{r}]"
            if not isinstance(row, list) or len(row) != n:
                got = len(row) if isinstance(row, list) else type(row).__name__
                raise self.error(f"row must have {n} entries, got {got}", section, key, path)
            for c, x in enumerate(row):
                if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
                    raise self.error(f"expected a finite number, got {x!r}", section, key, f"{path}[{c}]")
            rows.append([float(x) for x in row])
        return np.array(rows, dtype=float).reshape(n, n)


def parse_config(text: str, source: str = "<config>") -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigurationError(str(exc).splitlines()[0], line=line) from None
    rd = _Reader(parser, text)
    known = {"scenario", "system", "initial", "tolerances", "domain", "output", "checks"}
    for sec in parser.sections():
        if sec not in known:
            raise rd.error(f"unknown section (expected one of {sorted(known)})", sec)
    for sec in ("scenario", "system", "initial"):
        if not parser.has_section(sec):
            raise ConfigurationError("missing section", field=sec)

    name = parser.get("scenario", "name", fallback=Path(source).stem)
    t_end = rd.number("scenario", "t_end", positive=True)
    n = rd.number("system", "n", integer=True, positive=True)
    C = rd.matrix("system", "C", n)
    K = rd.matrix("system", "K", n)
    try:
        system = DampedSystem(C, K)
    except ConfigurationError as exc:
        raise rd.error(str(exc), "system") from None

    a = rd.array("initial", "a")
    if isinstance(a, list) and a and all(isinstance(x, list) for x in a):
        initial = [_row(rd, row, 2 * n, k) for k, row in enumerate(a)]
    else:
        initial = [rd.vector("initial", "a", 2 * n)]

    cfg = ScenarioConfig(name=name, system=system, initial=initial, t_end=t_end)

    if parser.has_section("tolerances"):
        for key in parser.options("tolerances"):
            if key in SOLVER_KEYS:
                setattr(cfg, key, rd.number("tolerances", key, positive=True))
            elif key == "volume_t_end":
                cfg.volume_t_end = rd.number("tolerances", key, positive=True)
            elif key in ALL_CHECKS:
                cfg.tolerances[key] = rd.number("tolerances", key)
                if cfg.tolerances[key] < 0:
                    raise rd.error("tolerance must be non-negative", "tolerances", key)
            else:
                raise rd.error("unknown tolerance name", "tolerances", key)

    if parser.has_section("domain"):
        try:
            cfg.domain = ens.DomainSpec(
                lower=rd.vector("domain", "lower", 2 * n),
                upper=rd.vector("domain", "upper", 2 * n),
                nodes=[int(x) for x in rd.vector("domain", "nodes", 2 * n)],
                rule=parser.get("domain", "rule", fallback="midpoint"),
            )
        except ConfigurationError as exc:
            if exc.field:
                raise
            raise rd.error(str(exc), "domain") from None
        lo, hi = cfg.domain.lower, cfg.domain.upper
        if any(not l < h for l, h in zip(lo, hi)):
            raise rd.error("domain has zero volume (every interval needs lower < upper)", "domain")
        if rd.has("domain", "t_end"):
            cfg.ensemble_t_end = rd.number("domain", "t_end", positive=True)
        if rd.has("domain", "times"):
            cfg.ensemble_times = rd.number("domain", "times", integer=True, positive=True)
            if cfg.ensemble_times < 2:
                raise rd.error("need at least 2 times", "domain", "times")

    if parser.has_section("output"):
        if rd.has("output", "dir"):
            cfg.out_dir = parser.get("output", "dir")
        if rd.has("output", "samples"):
            cfg.samples = rd.number("output", "samples", integer=True, positive=True)
            if cfg.samples < 2:
                raise rd.error("need at least 2 samples", "output", "samples")

    if parser.has_section("checks") and rd.has("checks", "select"):
        sel = rd.array("checks", "select")
        if not isinstance(sel, list) or not all(isinstance(s, str) for s in sel):
            raise rd.error("expected a list of check names", "checks", "select")
        for j, s in enumerate(sel):
            if s not in ALL_CHECKS:
                raise rd.error(f"unknown check {s!r}", "checks", "select", f"checks.select[{j}]")
        cfg.checks = tuple(sel)
    return cfg


def _row(rd, row, length, k):
    path = f"initial.a[{k}]"
    if not isinstance(row, list) or len(row) != length:
        raise rd.error(f"expected {length} entries", "initial", "a", path)
    for j, x in enumerate(row):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise rd.error(f"expected a finite number, got {x!r}", "initial", "a", f"{path}[{j}]")
    return [float(x) for x in row]


def bundled_scenarios() -> list[str]:
    root = resources.files("dissipham") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def resolve_config(path: str) -> tuple[str, str]:
    """(text, source) for a file path or the name of a bundled scenario."""
    p = Path(path)
    if p.is_file():
        return p.read_text(), str(p)
    name = p.name if p.name.endswith(".cfg") else p.name + ".cfg"
    if name in bundled_scenarios() and len(p.parts) == 1:
        res = resources.files("dissipham") / "scenarios" / name
        return res.read_text(), name
    raise ConfigurationError(f"config not found: {path} (bundled: {', '.join(bundled_scenarios())})")


def load_config(path: str) -> ScenarioConfig:
    text, source = resolve_config(path)
    return parse_config(text, source)


# --- output ---------------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def atomic_write(path: Path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(x if isinstance(x, str) else _fmt(x) for x in row))
    return "\n".join(lines) + "\n"


# --- pipelines -------------------------------------------------------------------------


@dataclass
class Run:
    cfg: ScenarioConfig
    out: Path
    report: ver.VerificationReport = field(default_factory=ver.VerificationReport)
    subs: dict = field(default_factory=dict)

    def file(self, name, scenario_id=None):
        if scenario_id is None or len(self.cfg.initial) == 1:
            return self.out / name
        stem, ext = os.path.splitext(name)
        return self.out / f"{stem}_{scenario_id.split('[')[-1].rstrip(']')}{ext}"

    def trajectory(self, k):
        if k not in self.subs:
            cfg = self.cfg
            sid = cfg.scenario_ids()[k]
            try:
                traj = integrate_damped(cfg.system, cfg.initial[k], cfg.t_end, cfg.rtol, cfg.atol)
            except IntegrationError as exc:
                raise IntegrationError(f"scenario {sid}: {exc}", exc.last_t) from exc
            self.subs[k] = build_substituting_system(traj, cfg.system)
        return self.subs[k]


def cmd_simulate(run: Run):
    cfg = run.cfg
    n = cfg.system.n
    header = ["t"] + [f"q_{i + 1}" for i in range(n)] + [f"p_{i + 1}" for i in range(n)] + ["H", "W", "hatH"]
    for k, sid in enumerate(cfg.scenario_ids()):
        sub = run.trajectory(k)
        t = np.linspace(sub.trajectory.t0, sub.trajectory.t_end, cfg.samples)
        y = sub.trajectory.evaluate(t)
        H = energy_array(cfg.system, y[:, :n], y[:, n:])
        W = sub.work(t)
        rows = np.column_stack([t, y, H, W, H + W])
        atomic_write(run.file("trajectory.csv", sid), csv_text(header, rows))


def cmd_substitute(run: Run):
    cfg = run.cfg
    n = cfg.system.n
    for k, sid in enumerate(cfg.scenario_ids()):
        sub = run.trajectory(k)
        seg_rows, table_rows = [], []
        for i in range(n):
            for j, seg in enumerate(sub.segments[i]):
                lo, hi = seg.bounds
                seg_rows.append([str(i + 1), str(j), seg.t_a, seg.t_b, lo, hi, str(seg.direction), str(int(seg.frozen))])
                for t, q, g in zip(seg.times, seg.q, seg.G):
                    table_rows.append([str(i + 1), str(j), t, q, g])
        atomic_write(
            run.file("segments.csv", sid),
            csv_text(["coord", "segment", "t_a", "t_b", "q_min", "q_max", "direction", "frozen"], seg_rows),
        )
        atomic_write(run.file("segment_tables.csv", sid), csv_text(["coord", "segment", "t", "q", "G"], table_rows))
        t = np.linspace(sub.trajectory.t0, sub.trajectory.t_end, cfg.samples)
        Wc = sub.work_components(t)
        rows = np.column_stack([t, Wc, Wc.sum(axis=1)])
        atomic_write(run.file("work.csv", sid), csv_text(["t"] + [f"W_{i + 1}" for i in range(n)] + ["W"], rows))


def _selected(cfg, names):
    return [c for c in names if c in cfg.checks]


def cmd_verify(run: Run):
    cfg = run.cfg
    chosen = _selected(cfg, SINGLE_CHECKS)
    h = cfg.verlet_step
    for k, sid in enumerate(cfg.scenario_ids()):
        sub = run.trajectory(k)
        sys_ = cfg.system
        tol = cfg.tolerance
        grad = phase = None
        if "gradient_match" in chosen or "consistency" in chosen:
            grad = ver.check_gradient_match(sys_, sub, scenario=sid, tol=tol("gradient_match"))
            if "gradient_match" in chosen:
                run.report.add(grad)
        if "phase_coincidence" in chosen or "consistency" in chosen:
            phase = ver.phase_coincidence_all(sys_, sub, h=h, scenario=sid, tol=tol("phase_coincidence"))
            if "phase_coincidence" in chosen:
                run.report.extend(phase)
        if "consistency" in chosen:
            run.report.add(ver.check_consistency(grad, phase, scenario=sid))
        if "hatH_constancy" in chosen:
            run.report.add(ver.check_hatH_constancy(sub, scenario=sid, tol=tol("hatH_constancy")))
        if "energy_balance" in chosen:
            run.report.add(ver.check_energy_balance(sub, scenario=sid, tol=tol("energy_balance")))
        if "volume_contraction" in chosen:
            t_vol = cfg.volume_t_end or min(cfg.t_end, 10.0)
            run.report.add(
                ver.check_volume_contraction(
                    sys_, cfg.initial[k], t_vol, cfg.rtol, cfg.atol, scenario=sid, tol=tol("volume_contraction")
                )
            )
        segs = _volume_segments(sub)
        if "conservative_volume" in chosen:
            for seg in segs:
                run.report.add(ver.check_conservative_volume(sub, seg, h=h, scenario=sid, tol=tol("conservative_volume")))
        if "verlet_symplectic" in chosen:
            for seg in segs:
                run.report.add(ver.check_verlet_symplectic(sub, seg, h=h, scenario=sid, tol=tol("verlet_symplectic")))


def _volume_segments(sub):
    """The first segment of each damped coordinate (coordinate 1's first segment when nothing is damped)."""
    segs = []
    for i in range(sub.n):
        if np.any(sub.system.C[i] != 0.0):
            live = [s for s in sub.segments[i] if not s.frozen]
            if live:
                segs.append(live[0])
    return segs or [sub.segments[0][0]]


def _finite_max(v):
    v = v[np.isfinite(v)]
    return float(v.max()) if v.size else math.nan


def _canonical_bracket_residual(field_, t):
    """max |{q_i(a_k), pi_j(a_m)} - delta_ij delta_km / w_k| over all slot pairs."""
    q, pi = field_.values(t)
    N, n = q.shape
    worst = 0.0
    for k in range(N):
        for m in range(N):
            for i in range(n):
                for j in range(n):
                    F = ens.evaluation_functional("q", k, i)
                    G = ens.evaluation_functional("pi", m, j)
                    b = ens.bracket_values(F, G, q, pi, field_.weights)
                    expected = 1.0 / field_.weights[k] if (k == m and i == j) else 0.0
                    worst = max(worst, abs(b - expected))
    return worst


def cmd_ensemble(run: Run):
    cfg = run.cfg
    if cfg.domain is None:
        raise ConfigurationError("ensemble needs a [domain] section", field="domain")
    sid = cfg.name
    grid = ens.build_grid(cfg.domain)
    t_end = cfg.ensemble_t_end or cfg.t_end
    field_ = ens.evolve_ensemble(cfg.system, grid, t_end, cfg.rtol, cfg.atol, n_times=cfg.ensemble_times)

    K = ens.functional_K(field_, field_.times)
    atomic_write(run.out / "khat.csv", csv_text(["t", "K"], np.column_stack([field_.times, K])))

    stride = max(1, (field_.times.size - 1) // 200)
    t_res = field_.times[::stride]
    rows, worst = [], 0.0
    for t in t_res:
        r = ens.hamilton_residual(field_, float(t))
        qr, pr = _finite_max(r.q_residual), _finite_max(r.pi_residual)
        rows.append([t, qr, pr, str(len(r.excluded))])
        worst = max(worst, r.max)
    atomic_write(run.out / "hamilton_residuals.csv", csv_text(["t", "q_residual", "pi_residual", "excluded_nodes"], rows))

    chosen = _selected(cfg, ENSEMBLE_CHECKS)
    details = {"nodes": grid.size, "t_end": t_end}
    if "hamilton_equations" in chosen:
        run.report.add(ver.ReportEntry("hamilton_equations", sid, worst, cfg.tolerance("hamilton_equations"),
                                       details={**details, "route": "rhs", "samples": int(t_res.size)}))
    if "deltaK_conserved" in chosen:
        run.report.add(ver.ReportEntry("deltaK_conserved", sid, ens.check_deltaK_conserved(field_),
                                       cfg.tolerance("deltaK_conserved"), details=details))
    if "euler_lagrange" in chosen:
        act = ens.action_and_EL_residual(field_)
        run.report.add(ver.ReportEntry("euler_lagrange", sid, act.el_residual, cfg.tolerance("euler_lagrange"),
                                       details={**details, "action": act.action, "excluded_bands": len(act.excluded_bands)}))
    if "canonical_bracket" in chosen:
        run.report.add(ver.ReportEntry("canonical_bracket", sid, _canonical_bracket_residual(field_, 0.5 * t_end),
                                       cfg.tolerance("canonical_bracket"), details=details))


def write_report(run: Run):
    atomic_write(run.out / "report.json", run.report.to_json())
    atomic_write(run.out / "report.txt", run.report.to_text())


# --- argument handling ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dissipham",
        description="Substituting conservative systems for damped linear oscillators: simulate, substitute, verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "integrate the damped system and write trajectory.csv",
        "substitute": "write segments.csv, segment_tables.csv and work.csv",
        "verify": "run the single-trajectory checks and write report.json / report.txt",
        "ensemble": "evolve the initial-condition grid and write khat.csv / hamilton_residuals.csv",
        "all": "every stage above",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="config file, or the name of a bundled scenario")
        p.add_argument("--out", help="output directory (default: [output] dir, else ./out/<scenario>)")
        p.add_argument("--checks", help="comma-separated check names (default: all)")
        p.add_argument("--tol-override", action="append", default=[], metavar="NAME=VALUE",
                       help="override a tolerance or solver setting; repeatable")
        p.add_argument("--seed", type=int, default=0, help="reserved for randomized property suites")
    return parser


def _apply_overrides(cfg: ScenarioConfig, args):
    for item in args.tol_override:
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep:
            raise ConfigurationError(f"expected NAME=VALUE, got {item!r}", field="--tol-override")
        try:
            v = float(value)
        except ValueError:
            raise ConfigurationError(f"not a number: {value!r}", field=f"--tol-override {name}") from None
        if not math.isfinite(v) or v < 0:
            raise ConfigurationError("value must be finite and non-negative", field=f"--tol-override {name}")
        if name in SOLVER_KEYS:
            if v == 0:
                raise ConfigurationError("value must be positive", field=f"--tol-override {name}")
            setattr(cfg, name, v)
        elif name in ALL_CHECKS:
            cfg.tolerances[name] = v
        else:
            raise ConfigurationError(f"unknown tolerance {name!r}", field="--tol-override")
    if args.checks:
        names = [c.strip() for c in args.checks.split(",") if c.strip()]
        for c in names:
            if c not in ALL_CHECKS:
                raise ConfigurationError(f"unknown check {c!r} (known: {', '.join(ALL_CHECKS)})", field="--checks")
        cfg.checks = tuple(names)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
    except ConfigurationError as exc:
        print(f"dissipham: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.out_dir or Path("out") / cfg.name)
    run = Run(cfg, out)
    stages = {
        "simulate": [cmd_simulate],
        "substitute": [cmd_substitute],
        "verify": [cmd_verify],
        "ensemble": [cmd_ensemble],
        "all": [cmd_simulate, cmd_substitute, cmd_verify] + ([cmd_ensemble] if cfg.domain is not None else []),
    }[args.command]
    reports = args.command in ("verify", "ensemble", "all")
    try:
        for stage in stages:
            stage(run)
    except ConfigurationError as exc:
        print(f"dissipham: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, ForceDomainError) as exc:
        print(f"dissipham: integration failure: {exc}", file=sys.stderr)
        if reports:
            write_report(run)
        return EXIT_INTEGRATION
    if reports:
        write_report(run)
        sys.stdout.write(run.report.to_text())
        return EXIT_OK if run.report.passed else EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
