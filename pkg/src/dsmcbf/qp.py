"""Small dense QP for the safety filter.

    minimize    ||u - u_t||^2 + eta ||w - w_t||^2
    subject to  a_u . u + a_w . w >= r     (each row)
                u_lo <= u <= u_hi

The Hessian is diagonal, so after scaling ``y = (u, sqrt(eta) w)`` the
problem is a Euclidean projection of the target onto a polyhedron.  It is
solved with the Goldfarb-Idnani dual active-set method, which starts from
the unconstrained minimizer and either terminates at the exact optimum or
exhibits a Farkas certificate of infeasibility.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from .dsm import RowBlock

OPTIMAL, INFEASIBLE, MAX_ITER = "optimal", "infeasible", "max_iter"

_BOX_LO, _BOX_HI = -2, -3  # tag markers for box rows
_ZERO_DIR = 1e-10
_FEAS_TOL = 1e-12
_DUAL_RAY = 1e100  # a dual step this long (normalized units) is an unbounded ray


def _bound(b, m: int, fill: float) -> np.ndarray:
    if b is None:
        return np.full(m, fill)
    b = np.array(b, dtype=float)
    return np.full(m, float(b)) if b.ndim == 0 else b.reshape(m)


@dataclass
class QpProblem:
    target_u: np.ndarray
    target_w: np.ndarray
    eta: float
    rows: RowBlock
    u_lo: Optional[np.ndarray] = None
    u_hi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.target_u = np.atleast_1d(np.asarray(self.target_u, float))
        self.target_w = np.atleast_1d(np.asarray(self.target_w, float))
        m = self.target_u.size
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        self.u_lo = _bound(self.u_lo, m, -np.inf)
        self.u_hi = _bound(self.u_hi, m, np.inf)
        if np.any(self.u_lo > self.u_hi):
            raise ValueError("u_lo must not exceed u_hi")
        if not isinstance(self.rows, RowBlock):
            self.rows = RowBlock.from_rows(self.rows, m, self.target_w.size)

    @property
    def m(self) -> int:
        return self.target_u.size

    @property
    def l(self) -> int:
        return self.target_w.size

    def objective(self, u, w) -> float:
        return float(np.sum((np.asarray(u) - self.target_u) ** 2)
                     + self.eta * np.sum((np.asarray(w) - self.target_w) ** 2))

    def to_dict(self) -> dict:
        def enc(a):
            return [None if not math.isfinite(x) else float(x) for x in np.ravel(a)]

        return {
            "target_u": enc(self.target_u), "target_w": enc(self.target_w), "eta": self.eta,
            "u_lo": enc(self.u_lo), "u_hi": enc(self.u_hi),
            "rows": {"a_u": self.rows.a_u.tolist(), "a_w": self.rows.a_w.tolist(),
                     "r": self.rows.r.tolist(), "tags": self.rows.tags.tolist()},
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, doc: dict) -> "QpProblem":
        def dec(a, fill):
            return np.array([fill if x is None else x for x in a], float)

        rows = doc["rows"]
        m, l = len(doc["target_u"]), len(doc["target_w"])
        block = RowBlock(np.reshape(rows["a_u"], (-1, m)), np.reshape(rows["a_w"], (-1, l)),
                         rows["r"], np.reshape(rows.get("tags", [[0, 0]] * len(rows["r"])), (-1, 2)))
        return cls(doc["target_u"], doc["target_w"], doc["eta"], block,
                   dec(doc["u_lo"], -np.inf), dec(doc["u_hi"], np.inf))


@dataclass
class QpSolution:
    u: np.ndarray
    w: np.ndarray
    status: str
    kkt_residual: float = math.inf
    active_set: list = field(default_factory=list)  # indices into problem.rows
    active_box: list = field(default_factory=list)  # (component, "lo"|"hi")
    iterations: int = 0
    warm_started: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class _Scaled:
    """Problem data in the scaled, row-normalized form used by the solver."""

    def __init__(self, prob: QpProblem):
        m, l = prob.m, prob.l
        self.m, self.l = m, l
        self.d = np.concatenate([np.ones(m), np.full(l, math.sqrt(prob.eta))])
        self.y0 = np.concatenate([prob.target_u, prob.target_w]) * self.d
        A = np.hstack([prob.rows.a_u, prob.rows.a_w]) / self.d if len(prob.rows) else np.zeros((0, m + l))
        b = prob.rows.r
        lo = np.flatnonzero(np.isfinite(prob.u_lo))
        hi = np.flatnonzero(np.isfinite(prob.u_hi))
        box_src = [(_BOX_LO, int(i)) for i in lo] + [(_BOX_HI, int(i)) for i in hi]
        if box_src:
            E = np.zeros((len(box_src), m + l))
            E[np.arange(len(lo)), lo] = 1.0
            E[len(lo) + np.arange(len(hi)), hi] = -1.0
            A = np.concatenate([A, E])
            b = np.concatenate([b, prob.u_lo[lo], -prob.u_hi[hi]])
        else:
            b = b.copy()
        self.src = list(range(len(prob.rows))) + box_src
        norms = np.sqrt(np.einsum("ij,ij->i", A, A))
        self.zero_rows = norms == 0.0
        safe = np.where(self.zero_rows, 1.0, norms)
        self.N = A / safe[:, None]
        self.b = b / safe
        self.norms = norms
        # a zero row reads 0 >= r: infeasible iff r > 0, otherwise vacuous
        self.trivially_infeasible = bool(np.any(self.zero_rows & (b > 0)))
        self.N[self.zero_rows] = 0.0
        self.b[self.zero_rows] = -np.inf

    def slacks(self, y):
        return self.N @ y - self.b


def _eq_solve(N_act, b_act, y0):
    """Projection of y0 onto {y : N_act y = b_act}; returns (y, multipliers)."""
    if len(N_act) == 0:
        return y0.copy(), np.zeros(0)
    G = N_act @ N_act.T
    rhs = b_act - N_act @ y0
    try:
        mu = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        mu = np.linalg.lstsq(G, rhs, rcond=None)[0]
    return y0 + N_act.T @ mu, mu


def _kkt_residual(S: _Scaled, y, active, lam) -> float:
    s = S.slacks(y)
    s = np.where(S.zero_rows, 0.0, s)
    stat = (y - S.y0) - (S.N[active].T @ lam if len(active) else 0.0)
    full_lam = np.zeros(len(S.b))
    full_lam[active] = lam
    terms = [np.max(np.abs(stat), initial=0.0),
             np.max(np.abs(full_lam * s), initial=0.0),
             np.max(-full_lam, initial=0.0),
             np.max(-s, initial=0.0)]
    scale = max(1.0, float(np.max(np.abs(S.y0), initial=0.0)), float(np.max(np.abs(y), initial=0.0)))
    return float(max(terms)) / scale


def _gi(S: _Scaled, max_iter: int):
    """Goldfarb-Idnani iterations; returns (status, y, active, lam, iters)."""
    y = S.y0.copy()
    active: list[int] = []
    lam = np.zeros(0)
    it = 0
    scale = max(1.0, float(np.max(np.abs(S.y0), initial=0.0)))
    while True:
        s = S.slacks(y)
        if len(s) == 0:
            return OPTIMAL, y, active, lam, it
        p = int(np.argmin(s))
        if s[p] >= -_FEAS_TOL * scale:
            return OPTIMAL, y, active, lam, it
        n_p = S.N[p]
        lam_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return MAX_ITER, y, active, lam, it
            if active:
                Na = S.N[active]
                rr = np.linalg.solve(Na @ Na.T, Na @ n_p)
                z = n_p - Na.T @ rr
            else:
                rr = np.zeros(0)
                z = n_p.copy()
            pos = rr > 1e-14
            t1, k = math.inf, -1
            if np.any(pos):
                with np.errstate(over="ignore"):
                    ratios = np.where(pos, lam / np.where(pos, rr, 1.0), math.inf)
                k = int(np.argmin(ratios))
                t1 = float(ratios[k])
                if t1 >= _DUAL_RAY:
                    t1, k = math.inf, -1
            zz = float(z @ z)
            t2 = math.inf
            if math.sqrt(zz) > _ZERO_DIR:
                t2 = float(S.b[p] - n_p @ y) / zz
            if math.isinf(t1) and math.isinf(t2):
                return INFEASIBLE, y, active, lam, it
            if math.isinf(t2):
                lam = lam - t1 * rr
                lam_p += t1
                del active[k]
                lam = np.delete(lam, k)
                continue
            t = min(t1, t2)
            y = y + t * z
            lam = lam - t * rr
            lam_p += t
            if t2 <= t1:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            del active[k]
            lam = np.delete(lam, k)


def _row_keys(prob: QpProblem):
    """Keys of the extended row list: rows, finite lower bounds, finite upper bounds.

    A key is ``(0, constraint, sample)`` for a row and ``(1, side, component)``
    for a box bound.
    """
    R = len(prob.rows)
    lo = np.flatnonzero(np.isfinite(prob.u_lo))
    hi = np.flatnonzero(np.isfinite(prob.u_hi))
    keys = np.zeros((R + len(lo) + len(hi), 3), dtype=np.int64)
    keys[:R, 1:] = prob.rows.tags
    keys[R:, 0] = 1
    keys[R:R + len(lo), 1] = _BOX_LO
    keys[R + len(lo):, 1] = _BOX_HI
    keys[R:, 2] = np.concatenate([lo, hi])
    return keys


_CODES = (OPTIMAL, INFEASIBLE, MAX_ITER)


class QpSolver:
    """Stateful solver; remembers the last active set (by row tag) for warm starts.

    ``backend`` selects the compiled kernel or the Python implementation;
    both run the same algorithm.
    """

    def __init__(self, max_iter: int = 200, warm_start: bool = True, backend: str | None = None):
        self.max_iter = max_iter
        self.warm_start = warm_start
        self.backend = _backend.resolve(backend)
        self._last_keys: list = []

    def reset(self):
        self._last_keys = []

    def _warm_indices(self, keys: np.ndarray) -> list[int]:
        active: list[int] = []
        for key in self._last_keys:
            hit = np.flatnonzero(np.all(keys == key, axis=1))
            if len(hit) and hit[0] not in active:
                active.append(int(hit[0]))
        return active

    def _solve_python(self, prob: QpProblem, warm_idx):
        S = _Scaled(prob)
        if S.trivially_infeasible:
            return INFEASIBLE, S.y0 / S.d, [], np.zeros(0), 0, False, math.inf
        warm = None
        if warm_idx:
            y, mu = _eq_solve(S.N[warm_idx], S.b[warm_idx], S.y0)
            scale = max(1.0, float(np.max(np.abs(S.y0), initial=0.0)))
            if not (np.any(mu < 0) or np.min(S.slacks(y)) < -_FEAS_TOL * scale):
                warm = (y, list(warm_idx), mu)
        it = 0
        if warm is not None:
            y, active, lam = warm
            status = OPTIMAL
        else:
            status, y, active, lam, it = _gi(S, self.max_iter)
        if status != OPTIMAL:
            return status, y / S.d, active, lam, it, False, math.inf
        if warm is None:
            # polish on the final active set (a warm start already is this solve)
            y_pol, mu = _eq_solve(S.N[active], S.b[active], S.y0)
            if np.all(mu >= -1e-12) and np.min(S.slacks(y_pol), initial=0.0) >= np.min(S.slacks(y), initial=0.0) - 1e-15:
                y, lam = y_pol, np.maximum(mu, 0.0)
        return OPTIMAL, y / S.d, active, lam, it, warm is not None, _kkt_residual(S, y, active, lam)

    def _solve_compiled(self, prob: QpProblem, warm_idx):
        code, z, active, lam, it, warm, kkt = _backend._core.qp_solve(
            np.ascontiguousarray(prob.rows.a_u, float).reshape(len(prob.rows), prob.m),
            np.ascontiguousarray(prob.rows.a_w, float).reshape(len(prob.rows), prob.l),
            np.ascontiguousarray(prob.rows.r, float), prob.u_lo, prob.u_hi,
            np.concatenate([prob.target_u, prob.target_w]), float(prob.eta),
            np.asarray(warm_idx, dtype=np.int64), int(self.max_iter))
        return _CODES[code], z, [int(j) for j in active], lam, it, bool(warm), kkt

    def solve(self, prob: QpProblem) -> QpSolution:
        keys = _row_keys(prob)
        R = len(prob.rows)
        warm_idx = self._warm_indices(keys) if self.warm_start and self._last_keys else []
        run = self._solve_compiled if self.backend == "compiled" else self._solve_python
        status, z, active, lam, it, warm, kkt = run(prob, warm_idx)
        if status != OPTIMAL:
            self._last_keys = []
            return QpSolution(z[: prob.m].copy(), z[prob.m:].copy(), status, iterations=it)
        u, w = z[: prob.m].copy(), z[prob.m:].copy()
        box = []
        rows_active = []
        for j in active:
            if j >= R:
                kind, i = keys[j, 1], int(keys[j, 2])
                if kind == _BOX_LO:
                    u[i] = prob.u_lo[i]
                    box.append((i, "lo"))
                else:
                    u[i] = prob.u_hi[i]
                    box.append((i, "hi"))
            else:
                rows_active.append(j)
        u = np.clip(u, prob.u_lo, prob.u_hi)
        self._last_keys = [keys[j] for j in active]
        return QpSolution(u, w, OPTIMAL, kkt, sorted(rows_active), box, it, warm)


def solve(problem: QpProblem, max_iter: int = 200, backend: str | None = None) -> QpSolution:
    """Cold-start solve (no warm-start state)."""
    return QpSolver(max_iter=max_iter, warm_start=False, backend=backend).solve(problem)
