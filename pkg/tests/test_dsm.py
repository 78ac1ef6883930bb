import math

import numpy as np
import pytest

from dsmcbf.dsm import CbfRow, RowBlock, delta_dot, eval_dsm, linear_rows, path_rows
from dsmcbf.flow import IntegratorConfig, integrate_flow
from dsmcbf.model import AlphaFn, ConstraintMap

from conftest import backends

X0 = np.array([0.5, math.pi + 0.1, 0.4, -0.2])
V0 = np.array([1.0])


@pytest.fixture(scope="module")
def setup():
    from dsmcbf.pendulum import build
    model, cmap, _ = build()
    bundle = integrate_flow(model, X0, V0, 10.0)
    return model, cmap, bundle


def test_eval_dsm_minima(setup):
    model, cmap, bundle = setup
    ev = eval_dsm(bundle, cmap, V0)
    direct = np.array([cmap.c(phi, V0) for phi in bundle.phi]).T
    np.testing.assert_allclose(ev.delta_grid, direct)
    np.testing.assert_allclose(ev.delta1, direct.min(axis=1))
    assert np.all(ev.delta_grid[np.arange(6), ev.argmin_tau] == ev.delta1)


def test_argmin_first_on_ties():
    cm = ConstraintMap(lambda x, v: np.array([1.0]), p=1, n=1, l=1)
    from dsmcbf.model import scalar_test_model
    b = integrate_flow(scalar_test_model(), [0.0], [0.0], 1.0)
    assert eval_dsm(b, cm, [0.0]).argmin_tau[0] == 0


def test_rows_match_directional_derivative(setup, rng):
    # slack at (u, w) equals d/dt delta + alpha(delta); d/dt from flows at perturbed starts
    model, cmap, bundle = setup
    alpha = AlphaFn(100.0)
    rows = path_rows(bundle, model, cmap, X0, V0, alpha)
    u, w = np.array([2.0]), np.array([-0.7])
    dd = delta_dot(bundle, model, cmap, X0, V0, u, w)  # (p, K+1)
    ev = eval_dsm(bundle, cmap, V0)
    expected = (dd + 100.0 * ev.delta_grid).T.reshape(-1)
    np.testing.assert_allclose(rows.slacks(u, w), expected, rtol=1e-10, atol=1e-9)

    xdot = model.f(X0) + model.g_mat(X0) @ u
    h = 1e-6
    tight = IntegratorConfig(rel_tol=1e-12, abs_tol=1e-14)
    stops = bundle.grid[1:-1]

    def margins(s):
        b = integrate_flow(model, X0 + s * h * xdot, V0 + s * h * w, 10.0, tight,
                           sensitivities=False, stops=stops)
        return cmap.c_batch(b.phi[np.isin(b.grid, bundle.grid)], V0 + s * h * w)

    fd = (margins(1) - margins(-1)) / (2 * h)
    np.testing.assert_allclose(dd.T, fd, atol=2e-4 * np.max(np.abs(fd)))


def test_row_order_and_tags(setup):
    model, cmap, bundle = setup
    rows = path_rows(bundle, model, cmap, X0, V0, AlphaFn(1.0))
    assert len(rows) == 6 * len(bundle)
    assert tuple(rows.tags[0]) == (0, 0)
    assert tuple(rows.tags[7]) == (1, 1)
    assert rows[7].tag == (1, 1)


def test_screen_drops_large_margins(setup):
    model, cmap, bundle = setup
    all_rows = path_rows(bundle, model, cmap, X0, V0, AlphaFn(1.0))
    few = path_rows(bundle, model, cmap, X0, V0, AlphaFn(1.0), screen=1.0)
    assert 0 < len(few) < len(all_rows)
    ev = eval_dsm(bundle, cmap, V0)
    assert len(few) == int(np.sum(ev.delta_grid <= 1.0))


def test_generic_map_matches_affine(setup):
    model, cmap, bundle = setup
    generic = ConstraintMap(cmap.c, p=6, n=4, l=1, c_x=cmap.C_x, c_v=cmap.C_v)
    a = path_rows(bundle, model, cmap, X0, V0, AlphaFn(10.0))
    b = path_rows(bundle, model, generic, X0, V0, AlphaFn(10.0))
    np.testing.assert_allclose(a.a_u, b.a_u, atol=1e-12)
    np.testing.assert_allclose(a.a_w, b.a_w, atol=1e-12)
    np.testing.assert_allclose(a.r, b.r, atol=1e-10)


@backends
def test_linear_rows_backends(backend, rng):
    q, K, n, l, m = 3, 5, 4, 2, 1
    args = (rng.normal(size=(q, n)), rng.normal(size=(K, n, n)), rng.normal(size=(K, n, l)),
            rng.normal(size=(q, l)), rng.normal(size=(K, q)), rng.uniform(1, 2, size=q),
            rng.normal(size=n), rng.normal(size=(n, m)))
    a_u, a_w, r = linear_rows(*args, backend=backend)
    Gx, sx, sv, Gv, vals, gain, fx, gx = args
    k, i = 3, 2
    np.testing.assert_allclose(a_u[k * q + i], Gx[i] @ sx[k] @ gx, rtol=1e-12)
    np.testing.assert_allclose(a_w[k * q + i], Gx[i] @ sv[k] + Gv[i], rtol=1e-12)
    assert r[k * q + i] == pytest.approx(-gain[i] * vals[k, i] - Gx[i] @ sx[k] @ fx)


class TestRowBlock:
    def test_roundtrip_rows(self):
        rows = [CbfRow(np.array([1.0]), np.array([2.0]), 0.5, (0, 1)),
                CbfRow(np.array([-1.0]), np.array([0.0]), 1.0, (2, 3))]
        block = RowBlock.from_rows(rows, 1, 1)
        assert [r.tag for r in block] == [(0, 1), (2, 3)]
        np.testing.assert_allclose(block.slacks([1.0], [1.0]), [2.5, -2.0])
        assert rows[0].slack(1.0, 1.0) == 2.5

    def test_empty_and_concat(self):
        e = RowBlock.empty(2, 1)
        assert len(e) == 0
        block = RowBlock([[1.0, 0.0]], [[0.0]], [1.0], [[0, 0]])
        both = RowBlock.concat([e, block, block])
        assert len(both) == 2 and both.a_u.shape == (2, 2)

    def test_scaled(self):
        block = RowBlock([[1.0], [2.0]], [[1.0], [1.0]], [1.0, 1.0], [[0, 0], [1, 0]])
        s = block.scaled([2.0, 0.5])
        np.testing.assert_allclose(s.r, [2.0, 0.5])
        np.testing.assert_allclose(s.a_u[:, 0], [2.0, 1.0])
