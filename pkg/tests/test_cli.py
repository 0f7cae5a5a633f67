import json
import os

import numpy as np
import pytest

from dissipham import cli
from dissipham.errors import ConfigurationError

GOOD = """
[scenario]
name = small
t_end = 8

[system]
n = 1
C = [[0.2]]
K = [[1.0]]

[initial]
a = [1.0, 0.0]
"""


def write(tmp_path, text, name="s.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_bundled_scenarios_parse():
    names = cli.bundled_scenarios()
    assert {"undamped.cfg", "damped1dof.cfg", "damped2dof_diag.cfg", "ensemble1dof.cfg"} <= set(names)
    for name in names:
        cfg = cli.load_config(name)
        assert cfg.t_end > 0
    cfg = cli.load_config("damped1dof")
    assert cfg.system.C[0, 0] == 0.2 and cfg.initial == [[1.0, 0.0]] and cfg.t_end == 60.0
    assert cli.load_config("ensemble1dof").domain.nodes == (2, 2)


def test_parse_multiple_initial_conditions_and_sections():
    text = GOOD.replace("a = [1.0, 0.0]", "a = [[1.0, 0.0], [0.0, 1.0]]") + (
        "\n[tolerances]\nhatH_constancy = 1e-7\nverlet_step = 5e-5\n\n[checks]\nselect = [\"hatH_constancy\"]\n"
    )
    cfg = cli.parse_config(text)
    assert cfg.scenario_ids() == ["small[0]", "small[1]"]
    assert cfg.tolerance("hatH_constancy") == 1e-7 and cfg.tolerance("gradient_match") == 1e-8
    assert cfg.verlet_step == 5e-5 and cfg.checks == ("hatH_constancy",)


@pytest.mark.parametrize(
    "old, new, field",
    [
        ("K = [[1.0]]", "K = [[1.0, 2.0]]", "system.K[0]"),
        ("C = [[0.2]]", "C = [[0.2]", "system.C"),
        ("a = [1.0, 0.0]", "a = [1.0]", "initial.a"),
        ("t_end = 8", "t_end = -1", "scenario.t_end"),
        ("n = 1", "n = one", "system.n"),
        ("a = [1.0, 0.0]", 'a = [1.0, "x"]', "initial.a[1]"),
    ],
)
def test_parse_errors_carry_field_path(old, new, field):
    with pytest.raises(ConfigurationError) as info:
        cli.parse_config(GOOD.replace(old, new))
    assert info.value.field == field
    assert info.value.line is not None


def test_unknown_names_rejected():
    with pytest.raises(ConfigurationError):
        cli.parse_config(GOOD + "\n[extras]\nx = 1\n")
    with pytest.raises(ConfigurationError):
        cli.parse_config(GOOD + "\n[tolerances]\nbogus = 1\n")
    with pytest.raises(ConfigurationError):
        cli.parse_config(GOOD + '\n[checks]\nselect = ["nope"]\n')
    with pytest.raises(ConfigurationError):
        cli.parse_config(GOOD.replace("[initial]\na = [1.0, 0.0]", ""))
    with pytest.raises(ConfigurationError):
        cli.load_config("no_such_scenario")


def test_malformed_row_exit_code(tmp_path, capsys):
    bad = GOOD.replace("n = 1", "n = 2").replace("C = [[0.2]]", "C = [[0.2, 0.0], [0.0]]")
    code = cli.main(["verify", "--config", write(tmp_path, bad), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "system.C[1]" in capsys.readouterr().err


def test_bad_flags_exit_code(tmp_path):
    cfg = write(tmp_path, GOOD)
    assert cli.main(["verify", "--config", cfg, "--checks", "nope"]) == 2
    assert cli.main(["verify", "--config", cfg, "--tol-override", "hatH_constancy"]) == 2
    assert cli.main(["verify", "--config", cfg, "--tol-override", "zzz=1"]) == 2


def test_simulate_and_substitute_outputs(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", write(tmp_path, GOOD), "--out", str(out)]) == 0
    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,q_1,p_1,H,W,hatH"
    assert lines[1] == "0,1,0,0.5,0,0.5"
    data = np.loadtxt(out / "trajectory.csv", delimiter=",", skiprows=1)
    assert np.abs(data[:, 5] - 0.5).max() <= 1e-8
    assert cli.main(["substitute", "--config", write(tmp_path, GOOD), "--out", str(out)]) == 0
    assert (out / "segments.csv").read_text().startswith("coord,segment,t_a,t_b,q_min,q_max,direction,frozen\n")
    assert (out / "segment_tables.csv").exists() and (out / "work.csv").exists()
    assert not [p for p in os.listdir(out) if p.endswith(".tmp")]


def test_verify_exit_status_follows_report(tmp_path):
    cfg = write(tmp_path, GOOD)
    out = tmp_path / "o"
    assert cli.main(["verify", "--config", cfg, "--out", str(out), "--checks", "hatH_constancy,gradient_match"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert {e["check"] for e in report} == {"hatH_constancy", "gradient_match"}
    code = cli.main(
        ["verify", "--config", cfg, "--out", str(out), "--checks", "hatH_constancy", "--tol-override", "hatH_constancy=0"]
    )
    assert code == 1
    assert "FAIL" in (out / "report.txt").read_text()


def test_verify_undamped_bundled(tmp_path):
    assert cli.main(["verify", "--config", "undamped", "--out", str(tmp_path)]) == 0


def test_ensemble_needs_domain(tmp_path):
    assert cli.main(["ensemble", "--config", write(tmp_path, GOOD), "--out", str(tmp_path)]) == 2


def test_outputs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, GOOD)
    for d in ("a", "b"):
        assert cli.main(["all", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_atomic_write_replaces(tmp_path):
    target = tmp_path / "x" / "f.txt"
    cli.atomic_write(target, "one")
    cli.atomic_write(target, "two")
    assert target.read_text() == "two"
    assert os.listdir(target.parent) == ["f.txt"]
