import math

import numpy as np
import pytest

from dsmcbf.flow import integrate_flow, IntegratorConfig
from dsmcbf.model import equilibrium_residual, f_pi, jac_x, jacobians
from dsmcbf.pendulum import PendulumParams, build, energy, mass_matrix, pendulum_dynamics


def test_constraints_at_equilibrium(pendulum):
    model, cmap, p = pendulum
    th = math.pi / 9
    np.testing.assert_allclose(cmap.c(model.x_bar([0.0]), [0.0]), [4.5, 4.5, th, th, 20.0, 20.0], atol=1e-12)


def test_policy_vanishes_on_equilibria(pendulum):
    model, _, _ = pendulum
    for v in (-3.0, 0.0, 2.5):
        assert model.pi(model.x_bar([v]), [v])[0] == 0.0
        assert equilibrium_residual(model, [v]) < 1e-12


def test_linearization_hurwitz(pendulum):
    model, _, _ = pendulum
    eig = np.linalg.eigvals(jac_x(model, model.x_bar([0.0]), [0.0]))
    assert np.max(eig.real) < 0


@pytest.mark.parametrize("theta", [0.0, 0.7, math.pi, 2.0])
def test_mass_matrix_determinant(theta):
    p = PendulumParams()
    det = np.linalg.det(mass_matrix([0.0, theta], p))
    assert det == pytest.approx(p.m_p * p.L ** 2 * (p.m_c + p.m_p * math.sin(theta) ** 2))
    assert det > 0


def test_affine_form_matches_lagrangian(pendulum, rng):
    # f(x) + g(x) u against M(q)^-1 (B u - C qdot - G) solved directly
    model, _, p = pendulum
    for _ in range(10):
        x = rng.normal(size=4) + [0, math.pi, 0, 0]
        u = rng.normal() * 10
        xdot = model.f(x) + model.g_mat(x)[:, 0] * u
        np.testing.assert_allclose(xdot[:2], x[2:])
        np.testing.assert_allclose(xdot[2:], pendulum_dynamics(x[:2], x[2:], u, p), rtol=1e-12, atol=1e-12)


def test_analytic_jacobian_matches_fd(pendulum, rng):
    model, _, _ = pendulum
    for _ in range(5):
        x = rng.normal(size=4) + [0, math.pi, 0, 0]
        v = rng.normal(size=1)
        A, B = jacobians(model, x, v)
        Af, Bf = jacobians(model.with_jac_mode("fd"), x, v)
        np.testing.assert_allclose(A, Af, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(B, Bf, rtol=1e-6, atol=1e-6)


def test_energy_conserved_without_input():
    p = PendulumParams(K_pi=[0.0, 0.0, 0.0, 0.0])
    model, _, _ = build(p.to_dict())
    x0 = np.array([0.0, 2.5, 0.3, -0.4])
    b = integrate_flow(model, x0, [0.0], 5.0, IntegratorConfig(rel_tol=1e-11, abs_tol=1e-13),
                       sensitivities=False)
    e = [energy(x, p) for x in b.phi]
    assert max(e) - min(e) < 1e-8


def test_params_validation():
    with pytest.raises(ValueError):
        PendulumParams(L=0.0)
    with pytest.raises(ValueError):
        PendulumParams(K_pi=[1.0, 2.0])


def test_compiled_field_matches_python(pendulum, rng):
    from dsmcbf import _backend
    if "compiled" not in _backend.available_backends():
        pytest.skip("compiled core not built")
    model, _, _ = pendulum
    x = np.array([0.3, math.pi + 0.1, -0.2, 0.4])
    v = np.array([0.5])
    a = integrate_flow(model, x, v, 2.0, backend="compiled")
    b = integrate_flow(model, x, v, 2.0, backend="python")
    np.testing.assert_allclose(a.phi[-1], b.phi[-1], atol=1e-6)
