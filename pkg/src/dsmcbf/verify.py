"""Property suites behind ``dsmcbf verify``.

Every suite takes an explicit seed and returns a JSON-serializable report
with a top-level ``passed`` flag.
"""
from __future__ import annotations

import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import pendulum
from .dsm import RowBlock
from .filter import Scenario, SimTrace, paper_scenario, simulate
from .flow import IntegrationError, IntegratorConfig, integrate_flow, lemma1_residual, sv_asymptote
from .model import SystemModel, hurwitz_linear_model
from .qp import INFEASIBLE, OPTIMAL, QpProblem, solve
from .terminal import eval_terminal

# ---------------------------------------------------------------------------
# QP: active-set enumeration oracle


def _constraint_matrix(prob: QpProblem):
    A = np.hstack([prob.rows.a_u, prob.rows.a_w]) if len(prob.rows) else np.zeros((0, prob.m + prob.l))
    b = list(prob.rows.r)
    rows = list(A)
    for i in range(prob.m):
        e = np.zeros(prob.m + prob.l)
        e[i] = 1.0
        if math.isfinite(prob.u_lo[i]):
            rows.append(e)
            b.append(prob.u_lo[i])
        if math.isfinite(prob.u_hi[i]):
            rows.append(-e)
            b.append(-prob.u_hi[i])
    if not rows:
        return np.zeros((0, prob.m + prob.l)), np.zeros(0)
    return np.array(rows), np.array(b)


def enumerate_qp(prob: QpProblem, feas_tol: float = 1e-9):
    """Brute-force the QP by trying every subset of constraints as equalities.

    For each subset S the equality-constrained minimizer
    ``z = z* + H^-1 A_S' mu`` with ``(A_S H^-1 A_S') mu = b_S - A_S z*`` is
    formed (pseudo-inverse for dependent subsets); the best candidate that
    satisfies every constraint is the optimum.  Returns ``(z, objective)`` or
    ``(None, inf)`` when no candidate is feasible.
    """
    A, b = _constraint_matrix(prob)
    N = prob.m + prob.l
    z_star = np.concatenate([prob.target_u, prob.target_w])
    hinv = np.concatenate([np.full(prob.m, 0.5), np.full(prob.l, 0.5 / prob.eta)])
    weights = 1.0 / hinv / 2.0  # objective = sum(weights * (z - z*)^2)
    norms = np.maximum(np.linalg.norm(A, axis=1), 1e-300)
    best, best_obj = None, math.inf
    R = len(b)
    for k in range(0, min(N, R) + 1):
        if k == 0:
            cands = z_star[None, :]
        else:
            subsets = np.array(list(itertools.combinations(range(R), k)), dtype=int)
            As = A[subsets]  # (S, k, N)
            bs = b[subsets]  # (S, k)
            AH = As * hinv  # (S, k, N)
            G = AH @ np.swapaxes(As, 1, 2)  # (S, k, k)
            rhs = bs - As @ z_star
            mu = np.einsum("sij,sj->si", np.linalg.pinv(G), rhs)
            cands = z_star + np.einsum("sij,si->sj", AH, mu)
        if R:
            slack = (cands @ A.T - b) / norms
            ok = np.all(slack >= -feas_tol, axis=1)
        else:
            ok = np.ones(len(cands), bool)
        if not np.any(ok):
            continue
        objs = np.sum(weights * (cands[ok] - z_star) ** 2, axis=1)
        j = int(np.argmin(objs))
        if objs[j] < best_obj:
            best_obj = float(objs[j])
            best = cands[ok][j]
    return best, best_obj


def random_qp(rng: np.random.Generator, max_dim: int = 6, max_rows: int = 12) -> QpProblem:
    m = int(rng.integers(1, 4))
    l = int(rng.integers(1, max_dim - m + 1))
    R = int(rng.integers(0, max_rows + 1))
    a_u = rng.normal(size=(R, m))
    a_w = rng.normal(size=(R, l))
    r = rng.normal(scale=2.0, size=R)
    if rng.random() < 0.5:
        half = rng.uniform(0.5, 3.0, size=m)
        lo, hi = -half, half
    else:
        lo = hi = None
    eta = float(np.exp(rng.uniform(np.log(0.05), np.log(10.0))))
    tags = np.stack([np.arange(R), np.zeros(R, int)], axis=1)
    return QpProblem(rng.normal(scale=3.0, size=m), rng.normal(scale=3.0, size=l), eta,
                     RowBlock(a_u, a_w, r, tags), lo, hi)


def qp_suite(seed: int = 0, count: int = 1000, tol: float = 1e-6) -> dict:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    matched = 0
    failures = []
    n_infeasible = 0
    for idx in range(count):
        prob = random_qp(rng)
        sol = solve(prob)
        z_or, obj_or = enumerate_qp(prob)
        oracle_feasible = z_or is not None
        n_infeasible += not oracle_feasible
        if sol.status == OPTIMAL and oracle_feasible:
            gap = abs(prob.objective(sol.u, sol.w) - obj_or)
            ok = gap <= tol * max(1.0, obj_or)
        else:
            gap = None
            ok = (sol.status == INFEASIBLE) and not oracle_feasible
        if ok:
            matched += 1
        else:
            failures.append({"index": idx, "status": sol.status, "oracle_feasible": oracle_feasible,
                             "gap": gap, "problem": prob.to_dict()})
    return {"suite": "qp", "seed": seed, "count": count, "matched": matched,
            "oracle_infeasible": n_infeasible, "passed": matched == count,
            "failures": failures[:5], "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# Sensitivities: finite differences, flow-commutation residual, asymptotes

TIGHT = IntegratorConfig(rel_tol=1e-12, abs_tol=1e-14)
ACCURATE = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-12)


def fd_sensitivities(model: SystemModel, x, v, T: float, eps: float = 1e-5, cfg=TIGHT):
    """Central differences of ``Phi(T)`` in ``x`` and ``v`` from flow-only integrations."""
    x = np.asarray(x, float)
    v = np.atleast_1d(np.asarray(v, float))

    def end(xx, vv):
        return integrate_flow(model, xx, vv, T, cfg, sensitivities=False).phi[-1]

    Sx = np.column_stack([(end(x + e, v) - end(x - e, v)) / (2 * eps) for e in eps * np.eye(len(x))])
    Sv = np.column_stack([(end(x, v + e) - end(x, v - e)) / (2 * eps) for e in eps * np.eye(len(v))])
    return Sx, Sv


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def random_hurwitz_planar(rng: np.random.Generator):
    """Planar ``xdot = A (x - E v)`` with eigenvalue real parts in [-3, -0.5]."""
    if rng.random() < 0.5:
        lam = -rng.uniform(0.5, 3.0, size=2)
        Q = rng.normal(size=(2, 2)) + 2.0 * np.eye(2)
        A = Q @ np.diag(lam) @ np.linalg.inv(Q)
    else:
        a, b = -rng.uniform(0.5, 3.0), rng.uniform(0.2, 2.0)
        Q = rng.normal(size=(2, 2)) + 2.0 * np.eye(2)
        A = Q @ np.array([[a, b], [-b, a]]) @ np.linalg.inv(Q)
    E = rng.normal(size=(2, 1))
    return hurwitz_linear_model(A, E, name="planar")


def sensitivity_suite(seed: int = 0, T: float = 10.0, tau_long: float = 40.0, fd_tol: float = 1e-3,
                      identity_tol: float = 1e-6, sx_tol: float = 1e-6, sv_tol: float = 1e-4) -> dict:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    pend, _, _ = pendulum.build()
    x = pend.x_bar(np.zeros(1)) + rng.uniform([-1.0, -0.2, -1.0, -0.5], [1.0, 0.2, 1.0, 0.5])
    v = rng.uniform(-2.0, 2.0, size=1)
    b = integrate_flow(pend, x, v, T)  # the tolerances the filter runs with
    Sx_fd, Sv_fd = fd_sensitivities(pend, x, v, T)
    fd = {"x": x.tolist(), "v": v.tolist(),
          "sx_rel_err": _rel(b.sx[-1], Sx_fd), "sv_rel_err": _rel(b.sv[-1], Sv_fd),
          "lemma1_residual": lemma1_residual(b, pend, x, v)}
    fd["passed"] = fd["sx_rel_err"] <= fd_tol and fd["sv_rel_err"] <= fd_tol and fd["lemma1_residual"] <= identity_tol

    asym = []
    for name, model, xs, vs in [("planar", random_hurwitz_planar(rng), rng.normal(size=2), rng.normal(size=1)),
                                ("pendulum", pend, x, v)]:
        bl = integrate_flow(model, xs, vs, tau_long, ACCURATE)
        sx_norm = float(np.linalg.norm(bl.sx[-1]))
        sv_err = float(np.linalg.norm(bl.sv[-1] - sv_asymptote(model, vs)))
        asym.append({"model": name, "sx_norm": sx_norm, "sv_err": sv_err,
                     "passed": sx_norm <= sx_tol and sv_err <= sv_tol})
    return {"suite": "sensitivity", "seed": seed, "fd": fd, "asymptotes": asym,
            "passed": fd["passed"] and all(a["passed"] for a in asym),
            "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# Closed-loop forward invariance over random starts


def random_start(rng: np.random.Generator, model: SystemModel, cmap, terminal, T: float = 10.0,
                 max_tries: int = 200):
    """Draw ``(x0, v0)`` near the equilibrium manifold with every margin nonnegative."""
    for _ in range(max_tries):
        v0 = rng.uniform(-3.0, 3.0, size=1)
        x0 = model.x_bar(v0) + rng.uniform([-1.0, -0.25, -1.5, -1.0], [1.0, 0.25, 1.5, 1.0])
        try:
            b = integrate_flow(model, x0, v0, T, sensitivities=False)
        except IntegrationError:
            continue
        if np.min(cmap.c_batch(b.phi, v0)) < 0:
            continue
        if terminal.size and np.min(eval_terminal(terminal, b.phi[-1], v0)[0]) < 0:
            continue
        return x0, v0
    raise RuntimeError("no admissible start found")


def invariance_scenarios(seed: int = 0, count: int = 100, t_end: float = 10.0) -> list[Scenario]:
    """Seeded starts, targets and nominal gains around the reference pendulum scenario."""
    base = paper_scenario()
    model, cmap, sf, *_ = base.build()
    K = np.asarray(model.meta["nominal_gain"], float).ravel()
    out = []
    for child in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.default_rng(child)
        x0, v0 = random_start(rng, model, cmap, sf.terminal, base.filter_config().T)
        doc = base.to_dict()
        doc.update(x0=x0.tolist(), v0=v0.tolist(), r=[float(rng.uniform(-4.0, 4.0))], t_end=t_end,
                   nominal={"kind": "state_feedback", "gain": (K * rng.uniform(0.5, 1.5, size=K.size)).tolist()})
        out.append(Scenario.from_dict(doc))
    return out


def _invariance_run(args):
    index, doc = args
    logging.disable(logging.WARNING)
    tr = simulate(Scenario.from_dict(doc))
    return {"index": index, "min_margin": tr.min_margin, "fallbacks": tr.fallback_count,
            "final_state": tr.x[-1].tolist(), "bounded": bool(np.all(np.isfinite(tr.x)))}


def invariance_suite(seed: int = 0, count: int = 100, t_end: float = 10.0, tol: float = 1e-4,
                     workers: int | None = None) -> dict:
    t0 = time.perf_counter()
    jobs = [(i, s.to_dict()) for i, s in enumerate(invariance_scenarios(seed, count, t_end))]
    workers = workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_invariance_run, jobs))
    else:
        runs = [_invariance_run(j) for j in jobs]
    safe = [r for r in runs if r["min_margin"] >= -tol and r["bounded"]]
    return {"suite": "invariance", "seed": seed, "count": count, "safe": len(safe),
            "worst_margin": min(r["min_margin"] for r in runs),
            "fallbacks": sum(r["fallbacks"] for r in runs),
            "unsafe": [r for r in runs if r not in safe][:5],
            "passed": len(safe) == count, "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# Terminal set: backup rollouts from sampled points


def terminal_samples(rng: np.random.Generator, terminal, count: int, v_range=(-4.0, 4.0)):
    """Points with nonnegative terminal margin, spread through the level sets."""
    model = terminal.model
    L = np.linalg.cholesky(np.linalg.inv(terminal.P))
    pts = []
    while len(pts) < count:
        v = rng.uniform(*v_range, size=1)
        level = np.min(terminal.gamma(v))
        if level <= 0:
            continue
        d = rng.normal(size=len(L))
        d /= np.linalg.norm(d)
        x = model.x_bar(v) + math.sqrt(level) * rng.uniform() ** 0.25 * (L @ d)
        if np.min(eval_terminal(terminal, x, v)[0]) >= 0:
            pts.append((x, v))
    return pts


def terminal_suite(seed: int = 0, count: int = 50, horizons: float = 3.0, dt: float = 0.01,
                   tol: float = 1e-6) -> dict:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    base = paper_scenario()
    model, cmap, sf, *_ = base.build()
    term = sf.terminal
    T = base.filter_config().T
    t_stop = horizons * T
    stops = np.arange(1, int(round(t_stop / dt))) * dt
    worst_t, worst_c, inclusion = math.inf, math.inf, True
    for x, v in terminal_samples(rng, term, count):
        inclusion &= bool(np.min(cmap.c(x, v)) >= 0)
        b = integrate_flow(model, x, v, t_stop, ACCURATE, sensitivities=False, stops=stops)
        on = np.isin(b.grid, np.concatenate([[0.0], stops, [t_stop]]))
        phi = b.phi[on]
        worst_c = min(worst_c, float(np.min(cmap.c_batch(phi, v))))
        worst_t = min(worst_t, min(float(np.min(eval_terminal(term, p, v)[0])) for p in phi))
    return {"suite": "terminal", "seed": seed, "count": count, "worst_terminal": worst_t,
            "worst_constraint": worst_c, "inclusion": inclusion,
            "passed": worst_t >= -tol and worst_c >= -tol and inclusion,
            "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# Post-hoc audit of the barrier condition along an executed trace


def audit_trace(scenario: Scenario, trace: SimTrace, h: float = 1e-6, slack: float = 1e-3,
                cfg=ACCURATE) -> dict:
    """Difference ``delta(tau_k, .)`` along the applied ``(xdot, w)`` at every tick.

    The sample grid at each tick is recomputed with the filter's integrator;
    margins at those samples come from independent flow-only integrations.
    Returns the worst ``ddelta + gain * delta`` over ticks, samples and rows.
    """
    t0 = time.perf_counter()
    model, cmap, sf, *_ = scenario.build()
    fc = scenario.filter_config()
    gain = float(np.max(np.asarray(fc.alpha_path.gain)))
    worst, where = math.inf, None
    for k in range(len(trace)):
        x, v, u, w = trace.x[k], trace.v[k], trace.u[k], trace.w[k]
        grid = integrate_flow(model, x, v, fc.T, fc.integrator).grid
        xdot = np.asarray(model.f(x), float) + model.g_mat(x) @ u

        def margins(s):
            xx, vv = x + s * h * xdot, v + s * h * w
            b = integrate_flow(model, xx, vv, fc.T, cfg, sensitivities=False, stops=grid[1:-1])
            return cmap.c_batch(b.phi[np.isin(b.grid, grid)], vv)

        cp, cm = margins(1.0), margins(-1.0)
        val = (cp - cm) / (2 * h) + gain * 0.5 * (cp + cm)
        j = np.unravel_index(np.argmin(val), val.shape)
        if val[j] < worst:
            worst, where = float(val[j]), {"tick": k, "sample": int(j[0]), "row": int(j[1])}
    return {"suite": "audit", "ticks": len(trace), "worst": worst, "at": where,
            "passed": worst >= -slack, "seconds": time.perf_counter() - t0}


SUITES = {"qp": qp_suite, "sensitivity": sensitivity_suite, "invariance": invariance_suite,
          "terminal": terminal_suite}


def run_suites(names, seed: int = 0) -> dict:
    reports = {name: SUITES[name](seed=seed) for name in names}
    return {"seed": seed, "suites": reports, "passed": all(r["passed"] for r in reports.values())}
