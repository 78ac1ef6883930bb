import numpy as np
import pytest

from dsmcbf.model import (AffineConstraintMap, AlphaFn, ConstraintMap, DimensionError, Dims, affine_model,
                          central_jacobian, equilibrium, equilibrium_residual, f_pi, get_factory,
                          hurwitz_linear_model, jacobians, registered, scalar_test_model, x_bar_jacobian)


class TestDims:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            Dims(2, 0, 1, 1)


class TestAlpha:
    def test_linear(self):
        assert AlphaFn(3.0)(2.0) == 6.0

    def test_per_row_gain(self):
        np.testing.assert_allclose(AlphaFn(np.array([1.0, 2.0]))(np.array([1.0, 1.0])), [1.0, 2.0])

    @pytest.mark.parametrize("gain", [0.0, -1.0])
    def test_rejects_nonpositive(self, gain):
        with pytest.raises(ValueError):
            AlphaFn(gain)


def test_scalar_model_field():
    m = scalar_test_model()
    # f_pi = -(x - v)
    np.testing.assert_allclose(f_pi(m, [2.0], [0.5]), [-1.5])
    assert equilibrium_residual(m, [0.7]) == 0.0


def test_dimension_errors():
    m = scalar_test_model()
    with pytest.raises(DimensionError):
        f_pi(m, [1.0, 2.0], [0.0])


def test_affine_equilibrium_solved_when_map_missing(rng):
    F = np.array([[0.0, 1.0], [2.0, -1.0]])
    G = np.array([[0.0], [1.0]])
    K = np.array([[6.0, 3.0]])
    Lv = np.array([[4.0]])
    m = affine_model(F, G, K, Lv)
    for v in rng.normal(size=(5, 1)):
        assert equilibrium_residual(m, v) < 1e-12
        np.testing.assert_allclose(f_pi(m, equilibrium(m, v)[0], v), 0.0, atol=1e-12)


def test_analytic_jacobians_match_fd(rng):
    m = affine_model(rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), rng.normal(size=(2, 3)),
                     rng.normal(size=(2, 1)))
    x, v = rng.normal(size=3), rng.normal(size=1)
    A, B = jacobians(m, x, v)
    Af, Bf = jacobians(m.with_jac_mode("fd"), x, v)
    np.testing.assert_allclose(A, Af, atol=1e-8)
    np.testing.assert_allclose(B, Bf, atol=1e-8)


def test_hurwitz_linear_model_equilibrium():
    A = np.array([[-1.0, 2.0], [0.0, -3.0]])
    E = np.array([[1.0], [2.0]])
    m = hurwitz_linear_model(A, E)
    np.testing.assert_allclose(equilibrium(m, [1.5])[0], [1.5, 3.0])
    np.testing.assert_allclose(x_bar_jacobian(m, [0.0]), E)
    np.testing.assert_allclose(f_pi(m, [1.5, 3.0], [1.5]), 0.0, atol=1e-14)


def test_central_jacobian_quadratic():
    J = central_jacobian(lambda z: np.array([z[0] ** 2, z[0] * z[1]]), np.array([1.0, 2.0]), 1e-5)
    np.testing.assert_allclose(J, [[2.0, 0.0], [2.0, 1.0]], atol=1e-8)


class TestConstraintMaps:
    def test_affine_batch_matches_rows(self, rng):
        cm = AffineConstraintMap(rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=(3, 1)))
        X = rng.normal(size=(4, 2))
        v = rng.normal(size=1)
        np.testing.assert_allclose(cm.c_batch(X, v), np.stack([cm.c(x, v) for x in X]))

    def test_generic_fd_jacobians(self):
        cm = ConstraintMap(lambda x, v: np.array([1.0 - x[0] ** 2 - v[0], x[1] * v[0]]), p=2, n=2, l=1)
        x, v = np.array([0.5, 2.0]), np.array([3.0])
        np.testing.assert_allclose(cm.C_x(x, v), [[-1.0, 0.0], [0.0, 3.0]], atol=1e-7)
        np.testing.assert_allclose(cm.C_v(x, v), [[-1.0], [2.0]], atol=1e-7)

    def test_affine_data_roundtrip(self, rng):
        cm = AffineConstraintMap(rng.normal(size=2), rng.normal(size=(2, 3)), rng.normal(size=(2, 1)))
        c0, Cx, Cv = ConstraintMap.affine_data(cm, rng.normal(size=3), rng.normal(size=1))
        np.testing.assert_allclose(c0, cm.c0, atol=1e-12)
        np.testing.assert_allclose(Cx, cm.Cx)


def test_registry():
    assert "pendulum-cart" in registered()
    with pytest.raises(KeyError):
        get_factory("no-such-model")
