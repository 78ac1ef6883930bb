import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from dsmcbf.flow import (IntegrationError, IntegratorConfig, SingularLinearization, integrate_flow,
                         lemma1_residual, propagate_plant, sv_asymptote)
from dsmcbf.model import affine_model, hurwitz_linear_model, scalar_test_model
from dsmcbf.verify import fd_sensitivities

from conftest import backends

TIGHT = IntegratorConfig(rel_tol=1e-11, abs_tol=1e-13)


@backends
def test_scalar_closed_form(backend):
    # xdot = -(x - v): Phi = v + (x - v) e^-t, S_x = e^-t, S_v = 1 - e^-t
    b = integrate_flow(scalar_test_model(), [2.0], [0.5], 3.0, TIGHT, backend=backend)
    e = np.exp(-b.grid)
    np.testing.assert_allclose(b.phi[:, 0], 0.5 + 1.5 * e, atol=1e-10)
    np.testing.assert_allclose(b.sx[:, 0, 0], e, atol=1e-10)
    np.testing.assert_allclose(b.sv[:, 0, 0], 1 - e, atol=1e-10)
    assert b.backend == backend


@backends
def test_linear_model_matches_expm(backend, rng):
    A = np.array([[-0.5, 2.0], [-1.0, -0.7]])
    E = rng.normal(size=(2, 1))
    m = hurwitz_linear_model(A, E)
    x, v = rng.normal(size=2), rng.normal(size=1)
    b = integrate_flow(m, x, v, 4.0, TIGHT, backend=backend)
    for t, phi, Sx, Sv in zip(b.grid, b.phi, b.sx, b.sv):
        eA = expm(A * t)
        np.testing.assert_allclose(phi, E @ v + eA @ (x - E @ v), atol=1e-9)
        np.testing.assert_allclose(Sx, eA, atol=1e-9)
        np.testing.assert_allclose(Sv, (np.eye(2) - eA) @ E, atol=1e-9)


def test_initial_conditions_exact(pendulum):
    model, _, _ = pendulum
    b = integrate_flow(model, [0.1, 3.0, 0.0, 0.0], [0.0], 1.0)
    assert np.array_equal(b.sx[0], np.eye(4))
    assert not b.sv[0].any()
    assert b.grid[0] == 0.0 and b.grid[-1] == 1.0


def test_bundle_is_read_only(pendulum):
    b = integrate_flow(pendulum[0], [0.0, math.pi, 0.0, 0.0], [0.0], 1.0)
    with pytest.raises(ValueError):
        b.phi[0, 0] = 1.0


@backends
def test_fd_sensitivities_pendulum(backend, pendulum):
    model, _, _ = pendulum
    x = np.array([0.4, math.pi - 0.15, 0.6, -0.3])
    v = np.array([1.2])
    b = integrate_flow(model, x, v, 10.0, backend=backend)
    Sx, Sv = fd_sensitivities(model, x, v, 10.0)
    assert np.linalg.norm(b.sx[-1] - Sx) <= 1e-3 * np.linalg.norm(Sx)
    assert np.linalg.norm(b.sv[-1] - Sv) <= 1e-3 * np.linalg.norm(Sv)


@backends
def test_lemma1_residual(backend, pendulum):
    model, _, _ = pendulum
    x = np.array([-0.5, math.pi + 0.2, 0.0, 0.5])
    b = integrate_flow(model, x, [0.3], 10.0, backend=backend)
    assert lemma1_residual(b, model, x, [0.3]) <= 1e-6


def test_backends_agree(pendulum):
    from dsmcbf import _backend
    if "compiled" not in _backend.available_backends():
        pytest.skip("compiled core not built")
    model, _, _ = pendulum
    x = np.array([0.2, math.pi + 0.1, 0.3, 0.0])
    a = integrate_flow(model, x, [1.0], 10.0, backend="compiled")
    b = integrate_flow(model, x, [1.0], 10.0, backend="python")
    assert len(a) == len(b)
    np.testing.assert_allclose(a.grid, b.grid, rtol=1e-9)
    np.testing.assert_allclose(a.sx, b.sx, atol=1e-9)


@backends
def test_stops_on_grid(backend, pendulum):
    stops = [0.123, 1.0, 2.5]
    b = integrate_flow(pendulum[0], [0.0, math.pi, 0.0, 0.0], [1.0], 3.0, stops=stops, backend=backend)
    for s in stops:
        assert s in b.grid


@backends
def test_plant_matches_solve_ivp(backend, pendulum):
    model, _, _ = pendulum
    x = np.array([0.1, math.pi + 0.05, -0.3, 0.2])
    u = np.array([3.0])
    ref = solve_ivp(lambda t, y: model.f(y) + model.g_mat(y) @ u, (0, 0.05), x, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(propagate_plant(model, x, u, 0.05, backend=backend), ref.y[:, -1], atol=1e-9)


def test_plant_zero_dt_is_identity(pendulum):
    x = np.array([0.1, 3.0, 0.0, 0.0])
    np.testing.assert_array_equal(propagate_plant(pendulum[0], x, [1.0], 0.0), x)


def test_sv_asymptote_linear(rng):
    A = np.array([[-1.0, 0.5], [0.0, -2.0]])
    E = rng.normal(size=(2, 1))
    m = hurwitz_linear_model(A, E)
    np.testing.assert_allclose(sv_asymptote(m, [0.0]), E, atol=1e-12)
    b = integrate_flow(m, [1.0, 1.0], [0.0], 40.0, TIGHT)
    assert np.linalg.norm(b.sx[-1]) < 1e-12
    np.testing.assert_allclose(b.sv[-1], E, atol=1e-10)


def test_singular_linearization():
    m = affine_model([[0.0]], [[1.0]], [[0.0]], [[0.0]], x_bar_map=[[1.0]])
    with pytest.raises(SingularLinearization):
        sv_asymptote(m, [0.0])


@backends
def test_step_budget_exhausted(backend):
    m = affine_model([[-1e6]], [[1.0]], [[0.0]], [[0.0]], x_bar_map=[[0.0]])
    cfg = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12, max_steps=5)
    with pytest.raises(IntegrationError) as err:
        integrate_flow(m, [1.0], [0.0], 1.0, cfg, backend=backend)
    assert err.value.t_last < 1.0


class TestConfig:
    def test_bad_tolerances(self):
        with pytest.raises(ValueError):
            IntegratorConfig(rel_tol=0.0)

    def test_step_cap_default(self):
        assert IntegratorConfig().step_cap(10.0) == 0.5

    def test_rejects_nonpositive_horizon(self):
        with pytest.raises(ValueError):
            integrate_flow(scalar_test_model(), [0.0], [0.0], 0.0)

    def test_rejects_nonfinite_state(self):
        with pytest.raises(ValueError):
            integrate_flow(scalar_test_model(), [np.nan], [0.0], 1.0)


def test_bundle_csv(tmp_path):
    b = integrate_flow(scalar_test_model(), [1.0], [0.0], 1.0)
    b.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "tau,phi_1,sx_11,sv_11"
    assert len(lines) == len(b) + 1


def test_backend_selected_at_import():
    import os
    import subprocess
    import sys
    env = dict(os.environ, DSMCBF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import dsmcbf; print(dsmcbf.BACKEND)"], env=env,
                         capture_output=True, text=True, check=True).stdout.strip()
    assert out == "python"
