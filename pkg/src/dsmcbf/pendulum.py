"""Inverted pendulum on a cart.

State ``x = (x, theta, xdot, thetadot)`` with ``theta = pi`` upright.  The
backup policy is the LQR law ``pi(x, v) = -K_pi (x - x_bar(v))`` about the
equilibrium family ``x_bar(v) = (v, pi, 0, 0)``, ``u_bar(v) = 0``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import AffineConstraintMap, Dims, SystemModel, register


@dataclass
class PendulumParams:
    m_c: float = 1.0
    m_p: float = 0.5
    L: float = 0.7
    g: float = 9.81
    K_pi: list = field(default_factory=lambda: [-0.44, 35.3, -1.4, 8.0])
    K_kappa: list = field(default_factory=lambda: [-35.0, 150.0, -20.0, 50.0])
    x_max: float = 4.5
    theta_max: float = np.pi / 9
    u_max: float = 20.0
    r: float = 4.0

    def __post_init__(self):
        if min(self.m_c, self.m_p, self.L, self.g) <= 0:
            raise ValueError("masses, length and gravity must be positive")
        if self.u_max <= 0:
            raise ValueError("u_max must be positive")
        self.K_pi = [float(k) for k in self.K_pi]
        self.K_kappa = [float(k) for k in self.K_kappa]
        if len(self.K_pi) != 4 or len(self.K_kappa) != 4:
            raise ValueError("gains must have four entries")

    def to_dict(self) -> dict:
        return asdict(self)


def mass_matrix(q, p: PendulumParams) -> np.ndarray:
    c = np.cos(q[1])
    return np.array([[p.m_c + p.m_p, p.m_p * p.L * c],
                     [p.m_p * p.L * c, p.m_p * p.L ** 2]])


def pendulum_dynamics(q, qdot, u, p: PendulumParams | None = None) -> np.ndarray:
    """Accelerations ``M(q)^-1 (B u - C(q, qdot) qdot - G(q))``."""
    p = p or PendulumParams()
    s = np.sin(q[1])
    C = np.array([[0.0, -p.m_p * p.L * qdot[1] * s], [0.0, 0.0]])
    G = np.array([0.0, p.m_p * p.g * p.L * s])
    B = np.array([1.0, 0.0])
    return np.linalg.solve(mass_matrix(q, p), B * float(u) - C @ qdot - G)


def energy(x, p: PendulumParams) -> float:
    """Total mechanical energy (kinetic + potential, pivot height as datum)."""
    q, qd = np.asarray(x[:2]), np.asarray(x[2:])
    return 0.5 * qd @ mass_matrix(q, p) @ qd - p.m_p * p.g * p.L * np.cos(q[1])


def _fg(x, p: PendulumParams):
    s, c = np.sin(x[1]), np.cos(x[1])
    thd = x[3]
    D = p.m_c + p.m_p * s * s
    f = np.array([
        x[2],
        thd,
        (p.m_p * p.L * s * thd ** 2 + p.m_p * p.g * c * s) / D,
        (-c * p.m_p * p.L * s * thd ** 2 - (p.m_c + p.m_p) * p.g * s) / (p.L * D),
    ])
    g = np.array([0.0, 0.0, 1.0 / D, -c / (p.L * D)])
    return f, g


def _fg_jac(x, p: PendulumParams):
    """d f / dx and d g / dx (only theta and thetadot columns are nonzero)."""
    s, c = np.sin(x[1]), np.cos(x[1])
    thd = x[3]
    mp, L = p.m_p, p.L
    D = p.m_c + mp * s * s
    D_th = 2 * mp * s * c
    N2 = mp * L * s * thd ** 2 + mp * p.g * c * s
    N3 = -c * mp * L * s * thd ** 2 - (p.m_c + mp) * p.g * s
    df = np.zeros((4, 4))
    df[0, 2] = 1.0
    df[1, 3] = 1.0
    df[2, 1] = (mp * L * c * thd ** 2 + mp * p.g * (c * c - s * s) - N2 * D_th / D) / D
    df[2, 3] = 2 * mp * L * s * thd / D
    N3_th = -mp * L * thd ** 2 * (c * c - s * s) - (p.m_c + mp) * p.g * c
    df[3, 1] = (N3_th - N3 * D_th / D) / (L * D)
    df[3, 3] = -2 * c * mp * L * s * thd / (L * D)
    dg = np.zeros((4, 4))
    dg[2, 1] = -D_th / D ** 2
    dg[3, 1] = (s + c * D_th / D) / (L * D)
    return df, dg


def make_pendulum_model(params: PendulumParams | None = None, jac_mode: str = "auto") -> SystemModel:
    p = params or PendulumParams()
    K = np.asarray(p.K_pi, float)
    E = np.array([1.0, 0.0, 0.0, 0.0])
    up = np.array([0.0, np.pi, 0.0, 0.0])

    def x_bar(v):
        return up + E * float(np.atleast_1d(v)[0])

    def pi(x, v):
        return np.array([-K @ (np.asarray(x) - x_bar(v))])

    def f_pi_jac(x, v):
        f, g = _fg(x, p)
        df, dg = _fg_jac(x, p)
        u = -K @ (x - x_bar(v))
        A = df + dg * u - np.outer(g, K)
        B = (g * (K @ E)).reshape(4, 1)
        return A, B

    params_vec = np.array([p.m_c, p.m_p, p.L, p.g, *K])
    return SystemModel(
        dims=Dims(4, 1, 1, 6),
        f=lambda x: _fg(x, p)[0],
        g=lambda x: _fg(x, p)[1].reshape(4, 1),
        pi=pi,
        x_bar=x_bar,
        u_bar=lambda v: np.zeros(1),
        f_pi_jac=f_pi_jac,
        x_bar_jac=lambda v: E.reshape(4, 1),
        jac_mode=jac_mode,
        name="pendulum-cart",
        kernel=("pendulum", params_vec),
        meta={"params": p, "nominal_gain": np.asarray(p.K_kappa, float).reshape(1, 4),
              "u_box": (np.array([-p.u_max]), np.array([p.u_max]))},
    )


def pendulum_constraints(params: PendulumParams | None = None) -> AffineConstraintMap:
    """The six rows: cart position, pole angle, and input bounds through pi."""
    p = params or PendulumParams()
    K = np.asarray(p.K_pi, float)
    # pi(x, v) = -K x + K[0] v + K[1] * pi
    pi_const = K[1] * np.pi
    c0 = [p.x_max, p.x_max,
          p.theta_max + np.pi, p.theta_max - np.pi,
          p.u_max - pi_const, p.u_max + pi_const]
    Cx = np.array([[-1.0, 0, 0, 0], [1.0, 0, 0, 0],
                   [0, -1.0, 0, 0], [0, 1.0, 0, 0],
                   K, -K])
    Cv = np.array([0.0, 0.0, 0.0, 0.0, -K[0], K[0]]).reshape(6, 1)
    return AffineConstraintMap(c0, Cx, Cv)


@register("pendulum-cart")
def build(params: dict | None = None, jac_mode: str = "auto"):
    """Registry factory: returns ``(model, constraint_map, params)``."""
    p = PendulumParams(**(params or {}))
    return make_pendulum_model(p, jac_mode), pendulum_constraints(p), p
