"""Plant models, backup-policy families and constraint maps.

A :class:`SystemModel` bundles a control-affine plant ``xdot = f(x) + g(x) u``
with a reference-parameterized prestabilizing policy ``pi(x, v)`` and the
equilibrium maps ``x_bar(v)``, ``u_bar(v)``.  Everything downstream works
with the prestabilized field ``f_pi(x, v) = f(x) + g(x) pi(x, v)`` and its
Jacobians.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class DimensionError(ValueError):
    """Raised when an argument does not match the model dimensions."""


@dataclass(frozen=True)
class Dims:
    n: int  # state
    m: int  # input
    l: int  # reference
    p: int  # constraints

    def __post_init__(self):
        for name in ("n", "m", "l", "p"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"dimension {name} must be positive")


@dataclass(frozen=True)
class AlphaFn:
    """Linear class-K-infinity function ``alpha(c) = gain * c``.

    ``gain`` may be a scalar or one gain per constraint row.
    """

    gain: float | np.ndarray = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.gain) <= 0):
            raise ValueError("alpha gain must be positive")

    def __call__(self, c):
        return np.asarray(self.gain) * c


def _as_vec(a, size: int, what: str) -> np.ndarray:
    if type(a) is np.ndarray and a.dtype == np.float64 and a.shape == (size,):
        return a
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.shape != (size,):
        raise DimensionError(f"{what} must have shape ({size},), got {a.shape}")
    return a


def fd_step(z: np.ndarray) -> float:
    """Central-difference step used by the finite-difference Jacobians."""
    return 1e-6 * (1.0 + float(np.max(np.abs(z), initial=0.0)))


def central_jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray, h: float) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    cols = []
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = h
        cols.append((np.asarray(fun(z + dz)) - np.asarray(fun(z - dz))) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Control-affine plant with a prestabilizing policy family.

    Optional analytic Jacobians: ``f_pi_jac(x, v) -> (A_pi, B_pi)`` and
    ``x_bar_jac(v) -> dx_bar/dv``.  Without them the model falls back to
    central differences.  ``kernel`` names a compiled right-hand side
    (``("pendulum", params)`` or ``("affine", params)``) that the
    integrator may use instead of the Python callables.
    """

    dims: Dims
    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    pi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    x_bar: Callable[[np.ndarray], np.ndarray]
    u_bar: Callable[[np.ndarray], np.ndarray]
    f_pi_jac: Optional[Callable] = None
    x_bar_jac: Optional[Callable] = None
    jac_mode: str = "auto"
    name: str = ""
    kernel: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.jac_mode not in ("auto", "analytic", "fd"):
            raise ValueError(f"unknown jac_mode {self.jac_mode!r}")
        if self.jac_mode == "analytic" and self.f_pi_jac is None:
            raise ValueError("analytic jac_mode requires f_pi_jac")

    @property
    def analytic(self) -> bool:
        return self.f_pi_jac is not None and self.jac_mode != "fd"

    def with_jac_mode(self, mode: str) -> "SystemModel":
        from dataclasses import replace

        return replace(self, jac_mode=mode)

    def g_mat(self, x) -> np.ndarray:
        return np.asarray(self.g(x), dtype=float).reshape(self.dims.n, self.dims.m)


def f_pi(model: SystemModel, x, v) -> np.ndarray:
    """Prestabilized vector field ``f(x) + g(x) pi(x, v)``."""
    d = model.dims
    x = _as_vec(x, d.n, "x")
    v = _as_vec(v, d.l, "v")
    u = np.atleast_1d(model.pi(x, v))
    return np.asarray(model.f(x), dtype=float) + model.g_mat(x) @ u


def _fd_jacs(model: SystemModel, x: np.ndarray, v: np.ndarray):
    A = central_jacobian(lambda z: f_pi(model, z, v), x, fd_step(x))
    B = central_jacobian(lambda z: f_pi(model, x, z), v, fd_step(v))
    return A, B


def jacobians(model: SystemModel, x, v) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A_pi, B_pi)``, the Jacobians of f_pi w.r.t. x and v."""
    d = model.dims
    x = _as_vec(x, d.n, "x")
    v = _as_vec(v, d.l, "v")
    if model.analytic:
        A, B = model.f_pi_jac(x, v)
        return np.asarray(A, dtype=float).reshape(d.n, d.n), np.asarray(B, dtype=float).reshape(d.n, d.l)
    return _fd_jacs(model, x, v)


def jac_x(model: SystemModel, x, v) -> np.ndarray:
    return jacobians(model, x, v)[0]


def jac_v(model: SystemModel, x, v) -> np.ndarray:
    return jacobians(model, x, v)[1]


def equilibrium(model: SystemModel, v) -> tuple[np.ndarray, np.ndarray]:
    v = _as_vec(v, model.dims.l, "v")
    return (np.asarray(model.x_bar(v), dtype=float).reshape(model.dims.n),
            np.atleast_1d(np.asarray(model.u_bar(v), dtype=float)))


def x_bar_jacobian(model: SystemModel, v) -> np.ndarray:
    v = _as_vec(v, model.dims.l, "v")
    if model.x_bar_jac is not None:
        return np.asarray(model.x_bar_jac(v), dtype=float).reshape(model.dims.n, model.dims.l)
    return central_jacobian(lambda z: np.asarray(model.x_bar(z), dtype=float), v, fd_step(v))


def equilibrium_residual(model: SystemModel, v) -> float:
    """Infinity norm of ``f(x_bar) + g(x_bar) u_bar``."""
    xb, ub = equilibrium(model, v)
    return float(np.max(np.abs(np.asarray(model.f(xb)) + model.g_mat(xb) @ ub)))


# ---------------------------------------------------------------------------
# Constraint maps


class ConstraintMap:
    """Reference-dependent constraints ``c(x, v) >= 0``.

    Jacobians default to central differences; subclasses override the
    batched methods when something faster is available.
    """

    def __init__(self, c: Callable, p: int, n: int, l: int,
                 c_x: Optional[Callable] = None, c_v: Optional[Callable] = None):
        self._c = c
        self._cx = c_x
        self._cv = c_v
        self.p, self.n, self.l = p, n, l

    def c(self, x, v) -> np.ndarray:
        return np.asarray(self._c(np.asarray(x, float), np.asarray(v, float)), dtype=float).reshape(self.p)

    def C_x(self, x, v) -> np.ndarray:
        x = np.asarray(x, float)
        if self._cx is not None:
            return np.asarray(self._cx(x, v), dtype=float).reshape(self.p, self.n)
        return central_jacobian(lambda z: self.c(z, v), x, fd_step(x))

    def C_v(self, x, v) -> np.ndarray:
        v = np.atleast_1d(np.asarray(v, float))
        if self._cv is not None:
            return np.asarray(self._cv(x, v), dtype=float).reshape(self.p, self.l)
        return central_jacobian(lambda z: self.c(x, z), v, fd_step(v))

    # batched over rows of X, shape (K, n)
    def c_batch(self, X, v) -> np.ndarray:
        return np.stack([self.c(x, v) for x in X])

    def C_x_batch(self, X, v) -> np.ndarray:
        return np.stack([self.C_x(x, v) for x in X])

    def C_v_batch(self, X, v) -> np.ndarray:
        return np.stack([self.C_v(x, v) for x in X])

    def affine_data(self, x0, v0):
        """Local affine description ``c(x, v) ~ c0 + Cx x + Cv v`` around (x0, v0)."""
        Cx, Cv = self.C_x(x0, v0), self.C_v(x0, v0)
        c0 = self.c(x0, v0) - Cx @ np.asarray(x0, float) - Cv @ np.atleast_1d(v0)
        return c0, Cx, Cv


class AffineConstraintMap(ConstraintMap):
    """Constraints ``c(x, v) = c0 + Cx x + Cv v`` with exact Jacobians."""

    def __init__(self, c0, Cx, Cv):
        self.c0 = np.asarray(c0, dtype=float)
        self.Cx = np.atleast_2d(np.asarray(Cx, dtype=float))
        self.Cv = np.asarray(Cv, dtype=float).reshape(self.c0.size, -1)
        p, n = self.Cx.shape
        super().__init__(None, p, n, self.Cv.shape[1])

    def c(self, x, v):
        return self.c0 + self.Cx @ np.asarray(x, float) + self.Cv @ np.atleast_1d(np.asarray(v, float))

    def C_x(self, x, v):
        return self.Cx.copy()

    def C_v(self, x, v):
        return self.Cv.copy()

    def c_batch(self, X, v):
        X = np.asarray(X, float)
        return X @ self.Cx.T + (self.c0 + self.Cv @ np.atleast_1d(np.asarray(v, float)))

    def C_x_batch(self, X, v):
        return np.broadcast_to(self.Cx, (len(X),) + self.Cx.shape)

    def C_v_batch(self, X, v):
        return np.broadcast_to(self.Cv, (len(X),) + self.Cv.shape)

    def affine_data(self, x0=None, v0=None):
        return self.c0.copy(), self.Cx.copy(), self.Cv.copy()


# ---------------------------------------------------------------------------
# Affine models


def affine_model(F, G, K, Lv, f0=None, p0=None, x_bar_map=None, name="affine",
                 jac_mode="auto") -> SystemModel:
    """Model with ``f(x) = F x + f0``, ``g(x) = G`` and ``pi(x, v) = -K x + Lv v + p0``.

    ``x_bar_map`` is the n-by-l matrix E of a linear equilibrium map
    ``x_bar(v) = E v``; when omitted it is solved from ``f_pi(x_bar, v) = 0``.
    """
    F = np.atleast_2d(np.asarray(F, float))
    n = F.shape[0]
    G = np.asarray(G, float).reshape(n, -1)
    m = G.shape[1]
    K = np.asarray(K, float).reshape(m, n)
    Lv = np.asarray(Lv, float).reshape(m, -1)
    l = Lv.shape[1]
    f0 = np.zeros(n) if f0 is None else np.asarray(f0, float).reshape(n)
    p0 = np.zeros(m) if p0 is None else np.asarray(p0, float).reshape(m)
    A_pi = F - G @ K
    B_pi = G @ Lv
    c_pi = f0 + G @ p0
    if x_bar_map is None:
        E = -np.linalg.solve(A_pi, B_pi)
        e0 = -np.linalg.solve(A_pi, c_pi)
    else:
        E = np.asarray(x_bar_map, float).reshape(n, l)
        e0 = np.zeros(n)

    def x_bar(v):
        return E @ np.atleast_1d(v) + e0

    def pi(x, v):
        return -K @ x + Lv @ np.atleast_1d(v) + p0

    params = np.concatenate([[n, m, l], F.ravel(), G.ravel(), K.ravel(), Lv.ravel(), f0, p0])
    return SystemModel(
        dims=Dims(n, m, l, 1),
        f=lambda x: F @ x + f0,
        g=lambda x: G,
        pi=pi,
        x_bar=x_bar,
        u_bar=lambda v: pi(x_bar(v), v),
        f_pi_jac=lambda x, v: (A_pi, B_pi),
        x_bar_jac=lambda v: E,
        jac_mode=jac_mode,
        name=name,
        kernel=("affine", params),
        meta={"A_pi": A_pi, "B_pi": B_pi},
    )


def scalar_test_model() -> SystemModel:
    """``xdot = -x + u`` with ``pi(x, v) = v``, i.e. ``f_pi = -(x - v)``."""
    return affine_model(F=[[-1.0]], G=[[1.0]], K=[[0.0]], Lv=[[1.0]], x_bar_map=[[1.0]], name="scalar")


def hurwitz_linear_model(A, E=None, name="linear") -> SystemModel:
    """``xdot = A (x - E v)`` realised as ``f = A x``, ``g = I``, ``pi = -A E v``."""
    A = np.atleast_2d(np.asarray(A, float))
    n = A.shape[0]
    E = np.eye(n) if E is None else np.asarray(E, float).reshape(n, -1)
    return affine_model(F=A, G=np.eye(n), K=np.zeros((n, n)), Lv=-A @ E, x_bar_map=E, name=name)


# ---------------------------------------------------------------------------
# Registry

_REGISTRY: dict[str, Callable] = {}


def register(name: str):
    def deco(factory):
        _REGISTRY[name] = factory
        return factory

    return deco


def get_factory(name: str) -> Callable:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}") from None


def registered() -> list[str]:
    return sorted(_REGISTRY)
