import json
import math

import numpy as np
import pytest

from dsmcbf.filter import (FilterConfig, FilterInfeasible, SafetyFilter, Scenario, StartupError,
                           paper_scenario, simulate)
from dsmcbf.flow import IntegratorConfig
from dsmcbf.qp import INFEASIBLE, OPTIMAL

THETA_MAX = math.pi / 9


def short(t_end=0.05, **kw):
    sc = paper_scenario()
    sc.t_end = t_end
    for k, v in kw.items():
        setattr(sc, k, v)
    return sc


class TestConfig:
    @pytest.mark.parametrize("kw", [{"T": 0.0}, {"eta": -1.0}, {"fallback": "maybe"}, {"state_rows": "x"}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            FilterConfig(**kw)

    def test_scenario_maps_to_config(self):
        cfg = paper_scenario().filter_config()
        assert cfg.T == 10.0 and cfg.eta == 0.1
        assert float(cfg.alpha_path.gain) == 100.0 and float(cfg.alpha_terminal.gain) == 400.0
        assert cfg.terminal_enabled and cfg.state_rows == "diagnose"


class TestScenario:
    def test_reference_values(self):
        sc = paper_scenario()
        assert sc.x0 == [0.0, math.pi, 0.0, 0.0] and sc.v0 == [0.0] and sc.r == [4.0]
        assert sc.t_end == 15.0

    def test_json_roundtrip(self, tmp_path):
        sc = paper_scenario()
        sc.to_json(tmp_path / "s.json")
        assert Scenario.load(tmp_path / "s.json").to_dict() == sc.to_dict()

    def test_unknown_keys(self):
        with pytest.raises(ValueError):
            Scenario.from_dict({"x00": [0.0]})
        with pytest.raises(ValueError):
            Scenario.from_dict({"filter": {"horizon": 3}})

    def test_overrides(self):
        sc = paper_scenario().with_overrides(["filter.T=5", "r=[2.0]", "filter.terminal.enabled=false",
                                              "model=pendulum-cart"])
        assert sc.filter["T"] == 5 and sc.r == [2.0]
        assert not sc.filter_config().terminal_enabled

    def test_bad_override(self):
        with pytest.raises(ValueError):
            paper_scenario().with_overrides(["novalue"])

    def test_scalar_coercion(self):
        assert Scenario.from_dict({"v0": 1.0}).v0 == [1.0]

    def test_startup_margins_positive(self):
        model, cmap, sf, kappa, rho, x0, v0 = paper_scenario().build()
        asm = sf.assemble(x0, v0)
        assert np.min(asm.dsm.delta1) > 0 and np.min(asm.terminal_values) > 0


@pytest.fixture(scope="module")
def boundary():
    # on the lower angle bound and rotating out: the tau = 0 row is decision-free and violated
    model, cmap, sf, *_ = paper_scenario().build()
    x = np.array([0.0, math.pi - THETA_MAX, 0.0, -0.01])
    return model, cmap, x


def test_state_rows_split_off(boundary):
    model, cmap, x = boundary
    sf = SafetyFilter(model, cmap, FilterConfig(), v0=[0.0])
    out = sf.step(x, [0.0], [0.0], [0.0])
    assert out.qp_status == OPTIMAL
    assert out.state_residual == pytest.approx(0.01)
    assert len(out.assembly.state_rows) == 4  # position and angle rows at tau = 0
    assert len(out.assembly.qp_rows) + len(out.assembly.state_rows) == len(out.assembly.rows)


def test_enforced_state_rows_fall_back(boundary):
    model, cmap, x = boundary
    sf = SafetyFilter(model, cmap, FilterConfig(state_rows="enforce"), v0=[0.0])
    out = sf.step(x, [0.0], [0.0], [0.0])
    assert out.qp_status == INFEASIBLE and out.used_fallback
    np.testing.assert_allclose(out.u, np.clip(model.pi(x, [0.0]), -20, 20))
    np.testing.assert_array_equal(out.w, [0.0])
    assert sf.fallback_count == 1


def test_error_mode_carries_problem(boundary):
    model, cmap, x = boundary
    sf = SafetyFilter(model, cmap, FilterConfig(state_rows="enforce", fallback="error"), v0=[0.0])
    with pytest.raises(FilterInfeasible) as err:
        sf.step(x, [0.0], [0.0], [0.0])
    doc = json.loads(err.value.problem_json)
    assert doc["eta"] == 0.1 and len(doc["rows"]["r"]) > 0


def test_nominal_passes_through_when_safe():
    model, cmap, sf, kappa, rho, x0, v0 = paper_scenario().build()
    out = sf.step(x0, v0, [0.0], [0.0])  # staying put is safe
    assert out.qp_status == OPTIMAL
    assert out.u[0] == pytest.approx(0.0, abs=1e-9) and out.w[0] == pytest.approx(0.0, abs=1e-9)


def test_short_run_properties():
    tr = simulate(short(0.1))
    assert len(tr) == 101
    assert set(tr.qp_status) == {OPTIMAL} and tr.fallback_count == 0
    assert np.all(np.abs(tr.u) <= 20.0 + 1e-9)
    assert tr.min_margin >= 0
    np.testing.assert_allclose(tr.t[1] - tr.t[0], 0.001)


def test_single_tick():
    tr = simulate(short(0.0))
    assert len(tr) == 1


def test_startup_error():
    with pytest.raises(StartupError, match="initial margin negative"):
        simulate(short(0.01, x0=[4.6, math.pi, 0.0, 0.0]))


def test_csv_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    simulate(short(0.02)).to_csv(a)
    simulate(short(0.02)).to_csv(b)
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0].split(",")
    assert header == ["t", "x1", "x2", "x3", "x4", "v1", "u1", "w1", "delta1", "deltaT",
                      "qp_status", "used_fallback", "solve_ms"]


def test_backup_nominal_kind():
    sc = short(0.02, nominal={"kind": "backup"})
    tr = simulate(sc)
    assert tr.fallback_count == 0


def test_terminal_disabled_reports_inf():
    sc = short(0.0).with_overrides(["filter.terminal.enabled=false"])
    tr = simulate(sc)
    assert math.isinf(tr.deltaT[0])


def test_on_step_sees_assembly():
    seen = []
    simulate(short(0.003), on_step=lambda k, x, v, out: seen.append((k, len(out.assembly.rows))))
    assert [k for k, _ in seen] == [0, 1, 2, 3]
