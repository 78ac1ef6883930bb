"""Finite-horizon trajectory margins and the linear barrier rows built from them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import _backend
from .flow import FlowBundle
from .model import AffineConstraintMap, AlphaFn, ConstraintMap, SystemModel, _as_vec

TERMINAL = -1  # sample index used in the tag of terminal rows


@dataclass(frozen=True)
class DsmEvaluation:
    delta_grid: np.ndarray  # (p, K+1)
    delta1: np.ndarray  # (p,)
    argmin_tau: np.ndarray  # (p,) first minimizing grid index


@dataclass(frozen=True)
class CbfRow:
    """One inequality ``a_u . u + a_w . w >= r``; ``tag = (constraint, sample)``."""

    a_u: np.ndarray
    a_w: np.ndarray
    r: float
    tag: tuple[int, int]

    def slack(self, u, w) -> float:
        return float(self.a_u @ np.atleast_1d(u) + self.a_w @ np.atleast_1d(w) - self.r)


class RowBlock:
    """A stack of :class:`CbfRow` kept as arrays.

    Iterating yields ``CbfRow`` objects; the solver works on the arrays.
    """

    def __init__(self, a_u, a_w, r, tags):
        self.r = np.asarray(r, float).reshape(-1)
        self.a_u = np.atleast_2d(np.asarray(a_u, float))
        self.a_w = np.atleast_2d(np.asarray(a_w, float))
        if len(self.r):
            self.a_u = self.a_u.reshape(len(self.r), -1)
            self.a_w = self.a_w.reshape(len(self.r), -1)
        self.tags = np.asarray(tags, dtype=np.int64).reshape(-1, 2)

    @classmethod
    def _make(cls, a_u, a_w, r, tags) -> "RowBlock":
        """Unchecked constructor for arrays already in canonical shape."""
        self = cls.__new__(cls)
        self.a_u, self.a_w, self.r, self.tags = a_u, a_w, r, tags
        return self

    @classmethod
    def empty(cls, m: int, l: int) -> "RowBlock":
        return cls(np.zeros((0, m)), np.zeros((0, l)), np.zeros(0), np.zeros((0, 2), int))

    @classmethod
    def from_rows(cls, rows, m: int, l: int) -> "RowBlock":
        rows = list(rows)
        if not rows:
            return cls.empty(m, l)
        return cls([r.a_u for r in rows], [r.a_w for r in rows], [r.r for r in rows],
                   [r.tag for r in rows])

    @classmethod
    def concat(cls, blocks) -> "RowBlock":
        blocks = list(blocks)
        return cls._make(np.concatenate([b.a_u for b in blocks]), np.concatenate([b.a_w for b in blocks]),
                         np.concatenate([b.r for b in blocks]), np.concatenate([b.tags for b in blocks]))

    def __len__(self):
        return len(self.r)

    def __getitem__(self, i) -> CbfRow:
        return CbfRow(self.a_u[i].copy(), self.a_w[i].copy(), float(self.r[i]),
                      (int(self.tags[i, 0]), int(self.tags[i, 1])))

    def __iter__(self) -> Iterator[CbfRow]:
        return (self[i] for i in range(len(self)))

    def slacks(self, u, w) -> np.ndarray:
        return self.a_u @ np.atleast_1d(u) + self.a_w @ np.atleast_1d(w) - self.r

    def select(self, mask) -> "RowBlock":
        return RowBlock._make(self.a_u[mask], self.a_w[mask], self.r[mask], self.tags[mask])

    def scaled(self, s) -> "RowBlock":
        s = np.broadcast_to(np.asarray(s, float), self.r.shape)
        return RowBlock(self.a_u * s[:, None], self.a_w * s[:, None], self.r * s, self.tags)


def eval_dsm(bundle: FlowBundle, cmap: ConstraintMap, v) -> DsmEvaluation:
    """``delta_i(tau_k) = c_i(Phi(tau_k), v)`` on the grid and its per-row minima."""
    v = np.atleast_1d(np.asarray(v, float))
    grid = np.asarray(cmap.c_batch(bundle.phi, v)).T  # (p, K+1)
    arg = np.argmin(grid, axis=1)  # first occurrence on ties
    return DsmEvaluation(delta_grid=grid, delta1=grid[np.arange(grid.shape[0]), arg], argmin_tau=arg)


def linear_rows(Gx, sx, sv, Gv, values, gain, fx, gx, backend: Optional[str] = None):
    """Rows for margins with a fixed state gradient ``Gx`` (q, n) over samples k.

    ``sx`` (K, n, n), ``sv`` (K, n, l), ``values`` (K, q).  Row ``k*q + i`` is
    ``a_u = Gx_i S_x g``, ``a_w = Gx_i S_v + Gv_i``, ``r = -gain_i values - Gx_i S_x f``.
    """
    q = Gx.shape[0]
    gain = np.full(q, float(gain)) if np.ndim(gain) == 0 else np.asarray(gain, float).reshape(q)
    if _backend.resolve(backend) == "compiled":
        c = np.ascontiguousarray
        return _backend._core.linear_rows(c(Gx, float), c(sx, float), c(sv, float), c(Gv, float),
                                       c(values, float), c(gain), c(fx, float), c(gx, float))
    JS = Gx @ sx  # (K, q, n)
    K = JS.shape[0]
    a_u = (JS @ gx).reshape(K * q, -1)
    a_w = (Gx @ sv + Gv).reshape(K * q, -1)
    r = (-gain * values - JS @ fx).reshape(-1)
    return a_u, a_w, r


def path_rows(bundle: FlowBundle, model: SystemModel, cmap: ConstraintMap, x, v,
              alpha: AlphaFn, screen: float = np.inf,
              dsm: Optional[DsmEvaluation] = None, fg=None) -> RowBlock:
    """Barrier rows ``d/dt delta_i(tau_k) >= -alpha(delta_i(tau_k))`` for every (i, k).

    Row order is sample-major: (k=0, i=0..p-1), (k=1, ...), ...  Rows whose
    margin exceeds ``screen`` are dropped.  ``fg`` may pass a precomputed
    ``(f(x), g(x))``.
    """
    d = model.dims
    x = _as_vec(x, d.n, "x")
    v = _as_vec(v, d.l, "v")
    if dsm is None:
        dsm = eval_dsm(bundle, cmap, v)
    fx, gx = fg if fg is not None else (np.asarray(model.f(x), float), model.g_mat(x))
    delta = dsm.delta_grid.T  # (K+1, p)
    K1, p = delta.shape
    if isinstance(cmap, AffineConstraintMap):
        a_u, a_w, r = linear_rows(cmap.Cx, bundle.sx, bundle.sv, cmap.Cv, delta, alpha.gain, fx, gx)
    else:
        J = np.asarray(cmap.C_x_batch(bundle.phi, v))  # (K+1, p, n)
        Cv = np.asarray(cmap.C_v_batch(bundle.phi, v))  # (K+1, p, l)
        JS = J @ bundle.sx  # (K+1, p, n)
        a_u = (JS @ gx).reshape(K1 * p, d.m)
        a_w = (J @ bundle.sv + Cv).reshape(K1 * p, d.l)
        r = (-np.asarray(alpha(delta)) - JS @ fx).reshape(-1)
    tags = np.empty((K1 * p, 2), dtype=np.int64)
    tags[:, 0] = np.tile(np.arange(p), K1)
    tags[:, 1] = np.repeat(np.arange(K1), p)
    block = RowBlock._make(a_u, a_w, r, tags)
    if np.isfinite(screen):
        block = block.select(delta.reshape(-1) <= screen)
    return block


def delta_dot(bundle: FlowBundle, model: SystemModel, cmap: ConstraintMap, x, v, u, w) -> np.ndarray:
    """Time derivative of every ``delta_i(tau_k)`` along ``(xdot, vdot) = (f + g u, w)``; shape (p, K+1)."""
    x = _as_vec(x, model.dims.n, "x")
    v = _as_vec(v, model.dims.l, "v")
    xdot = np.asarray(model.f(x), float) + model.g_mat(x) @ np.atleast_1d(u)
    w = np.atleast_1d(np.asarray(w, float))
    J = np.asarray(cmap.C_x_batch(bundle.phi, v))
    Cv = np.asarray(cmap.C_v_batch(bundle.phi, v))
    out = np.einsum("kpn,kn->kp", J, bundle.sx @ xdot) + (J @ bundle.sv + Cv) @ w
    return out.T
