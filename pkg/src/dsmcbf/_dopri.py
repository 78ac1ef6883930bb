"""Pure-Python Dormand-Prince 5(4) integrator with PI step control.

This is the fallback for :mod:`dsmcbf._core`; both follow the same step
sequence so they accept the same grid up to rounding.
"""
from __future__ import annotations

import math

import numpy as np

C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
A71, A73, A74, A75, A76 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = (71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

SAFE = 0.9
FAC_MIN = 0.2  # largest shrink 1/5
FAC_MAX = 10.0  # largest growth
BETA = 0.04
EXPO1 = 0.2 - BETA * 0.75


class IntegrationError(RuntimeError):
    """Step-size underflow or step budget exhausted.

    ``t_last`` is the last time reached with a valid state.
    """

    def __init__(self, msg: str, t_last: float):
        super().__init__(f"{msg} (last valid t = {t_last:.6g})")
        self.t_last = t_last


def _norm(e: np.ndarray, sc: np.ndarray) -> float:
    return math.sqrt(float(np.mean((e / sc) ** 2)))


def initial_step(rhs, y0, f0, rtol, atol, max_step):
    sc = atol + rtol * np.abs(y0)
    d0 = _norm(y0, sc)
    d1 = _norm(f0, sc)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, max_step)
    y1 = y0 + h0 * f0
    f1 = rhs(y1)
    d2 = _norm(f1 - f0, sc) / h0
    dm = max(d1, d2)
    h1 = max(1e-6, h0 * 1e-3) if dm <= 1e-15 else (0.01 / dm) ** 0.2
    return min(100 * h0, h1, max_step)


def dopri5(rhs, y0, t_end, rtol=1e-6, atol=1e-8, max_step=None, min_step=1e-12,
           max_steps=100000, stops=()):
    """Integrate autonomous ``y' = rhs(y)`` on ``[0, t_end]``.

    Returns ``(ts, ys)`` with every accepted step; ``t_end`` and each time
    in ``stops`` are hit exactly.
    """
    y = np.array(y0, dtype=float)
    if max_step is None:
        max_step = t_end / 20
    targets = sorted({float(s) for s in stops if 0.0 < s < t_end} | {float(t_end)})
    ts = [0.0]
    ys = [y.copy()]
    if t_end <= 0:
        return np.array(ts), np.array(ys)

    k1 = rhs(y)
    h = initial_step(rhs, y, k1, rtol, atol, max_step)
    t = 0.0
    facold = 1e-4
    reject = False
    nsteps = 0
    ti = 0
    while True:
        target = targets[ti]
        h = min(h, max_step)
        h_natural = h
        hit = False
        if t + 1.01 * h >= target:
            h = target - t
            hit = True
        elif h < min_step:
            raise IntegrationError("step size underflow", t)
        if nsteps >= max_steps:
            raise IntegrationError("max_steps exceeded", t)
        nsteps += 1

        k2 = rhs(y + h * A21 * k1)
        k3 = rhs(y + h * (A31 * k1 + A32 * k2))
        k4 = rhs(y + h * (A41 * k1 + A42 * k2 + A43 * k3))
        k5 = rhs(y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4))
        k6 = rhs(y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5))
        y_new = y + h * (A71 * k1 + A73 * k3 + A74 * k4 + A75 * k5 + A76 * k6)
        k7 = rhs(y_new)
        err_vec = h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = _norm(err_vec, sc)
        if not math.isfinite(err):
            err = 1e10

        fac11 = err ** EXPO1 if err > 0 else 0.0
        if err <= 1.0:
            fac = fac11 / facold ** BETA
            fac = max(1.0 / FAC_MAX, min(1.0 / FAC_MIN, fac / SAFE))
            h_new = h / fac
            facold = max(err, 1e-4)
            t = target if hit else t + h
            y = y_new
            k1 = k7
            ts.append(t)
            ys.append(y.copy())
            if reject:
                h_new = min(h_new, h)
            reject = False
            if hit:
                ti += 1
                if ti == len(targets):
                    break
                # a clipped step says nothing about the natural step size
                h_new = max(h_new, h_natural)
            h = h_new
        else:
            h = h / min(1.0 / FAC_MIN, fac11 / SAFE)
            reject = True
            if h < min_step:
                raise IntegrationError("step size underflow", t)
    return np.array(ts), np.array(ys)
