"""Prestabilized flow and its sensitivity Jacobians.

The flow ``Phi``, ``S_x = dPhi/dx`` and ``S_v = dPhi/dv`` are stacked into one
augmented state and integrated together, so all three are sampled on the
same adaptive grid.  Models that carry a ``kernel`` are integrated by the
compiled core when it is importable; everything else (or everything, when
``DSMCBF_PURE_PYTHON=1``) goes through :func:`dsmcbf._dopri.dopri5`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._backend import BACKEND, _core, available_backends, resolve
from ._dopri import IntegrationError, dopri5
from .model import SystemModel, _as_vec, equilibrium, f_pi, jacobians

__all__ = [
    "IntegratorConfig", "FlowBundle", "IntegrationError", "integrate_flow",
    "propagate_plant", "lemma1_residual", "sv_asymptote", "SingularLinearization",
    "BACKEND", "available_backends",
]

_KINDS = {"affine": 0, "pendulum": 1}

class SingularLinearization(ArithmeticError):
    """The linearization at the equilibrium is singular; the asymptote is undefined."""


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    max_step: Optional[float] = None  # None -> horizon / 20
    min_step: float = 1e-12
    max_steps: int = 100_000

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.min_step <= 0:
            raise ValueError("min_step must be positive")
        if self.max_step is not None and self.max_step < self.min_step:
            raise ValueError("need 0 < min_step <= max_step")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")

    def step_cap(self, horizon: float) -> float:
        return horizon / 20 if self.max_step is None else self.max_step


@dataclass(frozen=True)
class FlowBundle:
    """Samples of ``Phi``, ``S_x`` and ``S_v`` on the accepted grid."""

    grid: np.ndarray  # (K+1,)
    phi: np.ndarray  # (K+1, n)
    sx: Optional[np.ndarray]  # (K+1, n, n)
    sv: Optional[np.ndarray]  # (K+1, n, l)
    v: np.ndarray
    backend: str = field(default="python", compare=False)

    def __post_init__(self):
        for a in (self.grid, self.phi, self.sx, self.sv, self.v):
            if a is not None:
                a.setflags(write=False)

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def __len__(self):
        return len(self.grid)

    def to_csv(self, path) -> None:
        """Write ``tau, phi_1..phi_n, sx_11..sx_nn, sv_11..sv_nl``."""
        n = self.phi.shape[1]
        l = self.v.size
        header = ["tau"] + [f"phi_{i + 1}" for i in range(n)]
        header += [f"sx_{i + 1}{j + 1}" for i in range(n) for j in range(n)]
        header += [f"sv_{i + 1}{j + 1}" for i in range(n) for j in range(l)]
        cols = [self.grid[:, None], self.phi]
        if self.sx is not None:
            cols += [self.sx.reshape(len(self), -1), self.sv.reshape(len(self), -1)]
        else:
            header = header[: 1 + n]
        data = np.hstack(cols)
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in data:
                fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def _resolve_backend(model: SystemModel, backend: Optional[str]) -> str:
    backend = resolve(backend)
    if backend == "compiled" and (model.kernel is None or model.jac_mode == "fd"):
        return "python"
    return backend


def _targets(T: float, stops) -> np.ndarray:
    return np.array(sorted({float(s) for s in (() if stops is None else stops) if 0.0 < s < T} | {float(T)}))


def _compiled(model, mode, y0, v, u, T, cfg, stops):
    kind, params = model.kernel
    ts, ys, status, t_last = _core.integrate(
        _KINDS[kind], np.ascontiguousarray(params, dtype=float), mode,
        np.ascontiguousarray(y0, dtype=float), np.ascontiguousarray(v, dtype=float),
        np.ascontiguousarray(u, dtype=float), float(T), cfg.rel_tol, cfg.abs_tol,
        float(cfg.step_cap(T)), cfg.min_step, int(cfg.max_steps), _targets(T, stops))
    if status == 1:
        raise IntegrationError("step size underflow", t_last)
    if status == 2:
        raise IntegrationError("max_steps exceeded", t_last)
    return ts, ys


def _python(rhs, y0, T, cfg, stops):
    return dopri5(rhs, y0, T, cfg.rel_tol, cfg.abs_tol, cfg.step_cap(T), cfg.min_step,
                  cfg.max_steps, stops=() if stops is None else stops)


def integrate_flow(model: SystemModel, x, v, T: float, cfg: IntegratorConfig | None = None, *,
                   sensitivities: bool = True, stops=None, backend: str | None = None) -> FlowBundle:
    """Integrate ``Phi`` (and, by default, ``S_x``, ``S_v``) over ``[0, T]``.

    ``stops`` are extra times the grid must contain exactly.
    """
    cfg = cfg or IntegratorConfig()
    d = model.dims
    x = _as_vec(x, d.n, "x")
    v = _as_vec(v, d.l, "v")
    if not T > 0:
        raise ValueError("horizon T must be positive")
    if not np.all(np.isfinite(x)):
        raise ValueError("initial state must be finite")
    n, l = d.n, d.l
    if sensitivities:
        y0 = np.concatenate([x, np.eye(n).ravel(), np.zeros(n * l)])
    else:
        y0 = x.copy()

    which = _resolve_backend(model, backend)
    if which == "compiled":
        ts, ys = _compiled(model, 0 if sensitivities else 1, y0, v, np.zeros(0), T, cfg, stops)
    else:
        if sensitivities:
            def rhs(y):
                phi = y[:n]
                Sx = y[n:n + n * n].reshape(n, n)
                Sv = y[n + n * n:].reshape(n, l)
                A, B = jacobians(model, phi, v)
                return np.concatenate([f_pi(model, phi, v), (A @ Sx).ravel(), (A @ Sv + B).ravel()])
        else:
            def rhs(y):
                return f_pi(model, y, v)
        ts, ys = _python(rhs, y0, T, cfg, stops)

    K1 = len(ts)
    phi = ys[:, :n].copy()
    if sensitivities:
        sx = ys[:, n:n + n * n].reshape(K1, n, n).copy()
        sv = ys[:, n + n * n:].reshape(K1, n, l).copy()
        # initial conditions hold exactly by construction; keep them bit-exact
        sx[0] = np.eye(n)
        sv[0] = 0.0
    else:
        sx = sv = None
    return FlowBundle(grid=ts, phi=phi, sx=sx, sv=sv, v=v.copy(), backend=which)


def propagate_plant(model: SystemModel, x, u, dt: float, cfg: IntegratorConfig | None = None, *,
                    backend: str | None = None) -> np.ndarray:
    """State after ``dt`` seconds of ``xdot = f(x) + g(x) u`` with ``u`` held."""
    cfg = cfg or IntegratorConfig(rel_tol=1e-9, abs_tol=1e-11)
    x = _as_vec(x, model.dims.n, "x")
    u = _as_vec(u, model.dims.m, "u")
    if dt <= 0:
        return x.copy()
    cfg = IntegratorConfig(cfg.rel_tol, cfg.abs_tol, max_step=dt, min_step=cfg.min_step,
                           max_steps=cfg.max_steps)
    if _resolve_backend(model, backend) == "compiled":
        _, ys = _compiled(model, 2, x, np.zeros(model.dims.l), u, dt, cfg, None)
    else:
        def rhs(y):
            return np.asarray(model.f(y), float) + model.g_mat(y) @ u
        _, ys = _python(rhs, x, dt, cfg, None)
    return ys[-1].copy()


def lemma1_residual(bundle: FlowBundle, model: SystemModel, x, v) -> float:
    """``max_k || S_x(tau_k) f_pi(x, v) - f_pi(Phi(tau_k), v) ||_inf``."""
    fx = f_pi(model, x, v)
    res = 0.0
    for Sx, phi in zip(bundle.sx, bundle.phi):
        res = max(res, float(np.max(np.abs(Sx @ fx - f_pi(model, phi, v)))))
    return res


def sv_asymptote(model: SystemModel, v) -> np.ndarray:
    """Limit of ``S_v`` as tau -> infinity: ``-A_bar^-1 B_bar`` at the equilibrium."""
    xb, _ = equilibrium(model, v)
    A, B = jacobians(model, xb, v)
    sing = np.linalg.svd(A, compute_uv=False)
    if sing[-1] <= 1e-12 * max(1.0, sing[0]):
        raise SingularLinearization(
            "linearization at the equilibrium is singular; the indirect method is inconclusive")
    return -np.linalg.solve(A, B)
