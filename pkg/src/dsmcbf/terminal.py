"""Quadratic Lyapunov level-set terminal margin.

For each affine constraint row ``c_i(x, v) = c0_i + a_i . x + b_i . v`` the
largest level set of ``V = (x - x_bar(v))' P (x - x_bar(v))`` inside the
half-space has level ``Gamma_i(v) = cbar_i |cbar_i| / (a_i' P^-1 a_i)``,
where ``cbar_i(v) = c_i(x_bar(v), v)``.  The terminal margin component is
``Gamma_i(v) - V(x, v)``.  Using ``cbar |cbar|`` instead of ``cbar**2``
keeps the level negative when the equilibrium itself violates the row.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .dsm import TERMINAL, RowBlock, linear_rows
from .flow import FlowBundle
from .model import (AlphaFn, ConstraintMap, SystemModel, _as_vec, central_jacobian, equilibrium,
                    fd_step, jac_x, x_bar_jacobian)


class NotHurwitz(ValueError):
    """The closed-loop linearization is not Hurwitz; no quadratic terminal set exists."""


@dataclass(frozen=True, eq=False)
class QuadraticTerminalDsm:
    P: np.ndarray
    c0: np.ndarray  # affine data for the selected rows
    Cx: np.ndarray
    Cv: np.ndarray
    rows: np.ndarray  # indices into the constraint map
    model: SystemModel
    enabled: bool = True
    rebuild_per_v: bool = False
    v0: np.ndarray = None

    def __post_init__(self):
        # a^T P^-1 a per row, reused whenever P is fixed
        aPa = np.einsum("ij,ji->i", self.Cx, np.linalg.solve(self.P, self.Cx.T)) if len(self.Cx) else np.zeros(0)
        object.__setattr__(self, "_aPa", aPa)

    @property
    def size(self) -> int:
        return len(self.rows) if self.enabled else 0

    def lyapunov_residual(self) -> float:
        xb, _ = equilibrium(self.model, self.v0)
        A = jac_x(self.model, xb, self.v0)
        return float(np.linalg.norm(A.T @ self.P + self.P @ A + np.eye(len(A)), "fro"))

    def P_at(self, v) -> np.ndarray:
        if not self.rebuild_per_v:
            return self.P
        return _lyapunov(self.model, v)

    def cbar(self, v) -> np.ndarray:
        xb, _ = equilibrium(self.model, v)
        return self.c0 + self.Cx @ xb + self.Cv @ np.atleast_1d(v)

    def a_Pinv_a(self, P=None) -> np.ndarray:
        if P is None or P is self.P:
            return self._aPa
        return np.einsum("ij,ji->i", self.Cx, np.linalg.solve(P, self.Cx.T))

    def gamma(self, v) -> np.ndarray:
        cb = self.cbar(v)
        return cb * np.abs(cb) / self.a_Pinv_a(self.P_at(v))


def _lyapunov(model: SystemModel, v) -> np.ndarray:
    xb, _ = equilibrium(model, v)
    A = jac_x(model, xb, v)
    eig = np.linalg.eigvals(A)
    if np.max(eig.real) >= 0:
        raise NotHurwitz(f"closed-loop linearization has eigenvalue {eig[np.argmax(eig.real)]}")
    P = solve_continuous_lyapunov(A.T, -np.eye(len(A)))
    return 0.5 * (P + P.T)


def build_terminal(model: SystemModel, cmap: ConstraintMap, v0, *, enabled: bool = True,
                   rebuild_per_v: bool = False) -> QuadraticTerminalDsm:
    """Build the terminal margin about ``x_bar(v0)``.

    Constraint rows are linearized at ``(x_bar(v0), v0)``; rows with no state
    dependence are skipped (they cannot bound a level set).
    """
    v0 = _as_vec(v0, model.dims.l, "v0")
    P = _lyapunov(model, v0)
    xb, _ = equilibrium(model, v0)
    c0, Cx, Cv = cmap.affine_data(xb, v0)
    rows = np.flatnonzero(np.any(Cx != 0, axis=1))
    dsm = QuadraticTerminalDsm(P=P, c0=c0[rows], Cx=Cx[rows], Cv=Cv[rows], rows=rows,
                               model=model, enabled=enabled, rebuild_per_v=rebuild_per_v, v0=v0)
    gam = dsm.gamma(v0)
    if np.any(gam <= 0):
        warnings.warn("equilibrium x_bar(v0) lies on or outside a constraint boundary; "
                      "terminal set is degenerate", RuntimeWarning, stacklevel=2)
    return dsm


def omitted_terminal(model: SystemModel) -> QuadraticTerminalDsm:
    n, l = model.dims.n, model.dims.l
    return QuadraticTerminalDsm(P=np.eye(n), c0=np.zeros(0), Cx=np.zeros((0, n)), Cv=np.zeros((0, l)),
                                rows=np.zeros(0, int), model=model, enabled=False,
                                v0=np.zeros(l))


def eval_terminal(dsm: QuadraticTerminalDsm, x, v):
    """Return ``(values, grad_x, grad_v)`` of the terminal margin components."""
    d = dsm.model.dims
    x = _as_vec(x, d.n, "x")
    v = _as_vec(v, d.l, "v")
    if not dsm.enabled:
        return np.zeros(0), np.zeros((0, d.n)), np.zeros((0, d.l))
    xb = np.asarray(dsm.model.x_bar(v), float)
    P = dsm.P_at(v)
    e = x - xb
    Pe = P @ e
    aPa = dsm.a_Pinv_a(P)
    cb = dsm.c0 + dsm.Cx @ xb + dsm.Cv @ v
    values = cb * np.abs(cb) / aPa - e @ Pe
    grad_x = np.tile(-2.0 * Pe, (len(values), 1))
    if dsm.rebuild_per_v:
        grad_v = central_jacobian(lambda z: eval_terminal(_frozen(dsm, z), x, z)[0], v, fd_step(v))
    else:
        Xb = x_bar_jacobian(dsm.model, v)
        dcb = dsm.Cx @ Xb + dsm.Cv  # (p_T, l)
        grad_v = (2.0 * np.abs(cb) / aPa)[:, None] * dcb + 2.0 * (Pe @ Xb)[None, :]
    return values, grad_x, grad_v


def _frozen(dsm: QuadraticTerminalDsm, v) -> QuadraticTerminalDsm:
    from dataclasses import replace

    return replace(dsm, P=_lyapunov(dsm.model, v), rebuild_per_v=False)


def terminal_rows(dsm: QuadraticTerminalDsm, bundle: FlowBundle, model: SystemModel, x, v,
                  alpha: AlphaFn, evaluation=None, fg=None) -> RowBlock:
    """Barrier rows on the terminal margin evaluated at ``Phi(T)``.

    ``evaluation`` may pass a precomputed ``eval_terminal(dsm, Phi(T), v)``
    and ``fg`` a precomputed ``(f(x), g(x))``.
    """
    d = model.dims
    if not dsm.enabled:
        return RowBlock.empty(d.m, d.l)
    x = _as_vec(x, d.n, "x")
    v = _as_vec(v, d.l, "v")
    values, Gx, Gv = evaluation if evaluation is not None else eval_terminal(dsm, bundle.phi[-1], v)
    fx, gx = fg if fg is not None else (np.asarray(model.f(x), float), model.g_mat(x))
    a_u, a_w, r = linear_rows(Gx, bundle.sx[-1:], bundle.sv[-1:], Gv, values[None, :],
                              alpha.gain, fx, gx)
    tags = np.stack([dsm.rows, np.full(len(dsm.rows), TERMINAL)], axis=1).astype(np.int64)
    return RowBlock._make(a_u, a_w, r, tags)
