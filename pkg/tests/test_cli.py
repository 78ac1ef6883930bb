import json
import subprocess
import sys
from pathlib import Path

import pytest

from dsmcbf.cli import main
from dsmcbf.filter import paper_scenario

SCENARIO = Path(__file__).resolve().parents[1] / "scenarios" / "pendulum_reference.json"


@pytest.fixture
def short_scenario(tmp_path):
    sc = paper_scenario()
    sc.t_end = 0.02
    path = tmp_path / "short.json"
    sc.to_json(path)
    return path


def test_shipped_scenario_matches_builtin():
    assert json.loads(SCENARIO.read_text()) == paper_scenario().to_dict()


def test_simulate_ok(short_scenario, tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["simulate", "--scenario", str(short_scenario), "--out", str(out)]) == 0
    assert "min margin" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 22


def test_simulate_deterministic(short_scenario, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["simulate", "--scenario", str(short_scenario), "--out", str(a), "--seed", "3"])
    main(["simulate", "--scenario", str(short_scenario), "--out", str(b), "--seed", "3"])
    assert a.read_bytes() == b.read_bytes()


def test_timing_column(short_scenario, tmp_path):
    out = tmp_path / "t.csv"
    main(["simulate", "--scenario", str(short_scenario), "--out", str(out), "--timing"])
    assert not out.read_text().splitlines()[1].endswith("nan")


def test_zero_horizon_single_row(short_scenario, tmp_path):
    out = tmp_path / "t.csv"
    assert main(["simulate", "--scenario", str(short_scenario), "--out", str(out), "--set", "t_end=0"]) == 0
    assert len(out.read_text().splitlines()) == 2


def test_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "t_end": 1.0,\n  oops\n}\n')
    assert main(["simulate", "--scenario", str(bad)]) == 1
    assert ":3:3:" in capsys.readouterr().err


def test_invalid_scenario(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"wheels": 4}')
    assert main(["simulate", "--scenario", str(bad)]) == 1


def test_missing_file(tmp_path):
    assert main(["simulate", "--scenario", str(tmp_path / "nope.json")]) == 1


def test_outside_safe_set(short_scenario, capsys):
    code = main(["simulate", "--scenario", str(short_scenario), "--set", "x0=[4.6, 3.141592653589793, 0, 0]"])
    assert code == 3
    assert "initial margin negative" in capsys.readouterr().err


def test_violation_exit(short_scenario, tmp_path, monkeypatch):
    # a trace whose recorded margins go negative maps to exit 2
    from dsmcbf import cli, filter as flt

    real = flt.simulate

    def broken(sc, **kw):
        tr = real(sc, **kw)
        tr.margins[-1, 0] = -1.0
        return tr

    monkeypatch.setattr(cli, "simulate", broken)
    assert main(["simulate", "--scenario", str(short_scenario)]) == 2


def test_verify_qp(tmp_path, monkeypatch):
    from dsmcbf import verify
    monkeypatch.setitem(verify.SUITES, "qp", lambda seed: verify.qp_suite(seed=seed, count=50))
    out = tmp_path / "r.json"
    assert main(["verify", "--suite", "qp", "--seed", "0", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["passed"] and rep["suites"]["qp"]["matched"] == 50


def test_verify_failure_exit(monkeypatch):
    from dsmcbf import verify
    monkeypatch.setitem(verify.SUITES, "qp", lambda seed: {"passed": False, "seconds": 0.0})
    assert main(["verify", "--suite", "qp"]) == 2


def test_sensitivity_check(short_scenario, tmp_path, capsys):
    out = tmp_path / "flow.csv"
    assert main(["sensitivity-check", "--scenario", str(short_scenario), "--out", str(out)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["lemma1_residual"] <= 1e-6
    assert out.read_text().startswith("tau,phi_1")


def test_dump_qp(short_scenario, tmp_path):
    out = tmp_path / "qp.json"
    assert main(["dump-qp", "--scenario", str(short_scenario), "--tick", "3", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["tick"] == 3 and doc["status"] == "optimal"
    from dsmcbf.qp import QpProblem, solve
    assert solve(QpProblem.from_dict(doc)).optimal


def test_module_entry_point(short_scenario):
    res = subprocess.run([sys.executable, "-m", "dsmcbf", "simulate", "--scenario", str(short_scenario)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
