"""Compiled core against the pure-Python fallback on the per-tick kernels.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import logging
import math
import timeit

import numpy as np

from dsmcbf import _backend
from dsmcbf.dsm import eval_dsm, linear_rows
from dsmcbf.filter import paper_scenario
from dsmcbf.flow import integrate_flow, propagate_plant
from dsmcbf.qp import QpProblem, QpSolver


def cases():
    model, cmap, sf, kappa, rho, _, _ = paper_scenario().build()
    x = np.array([0.3, math.pi - 0.2, 0.5, 0.3])
    v = np.array([0.5])
    cfg = sf.cfg
    bundle = integrate_flow(model, x, v, cfg.T, cfg.integrator)
    delta = eval_dsm(bundle, cmap, v).delta_grid.T.copy()
    fx, gx = np.asarray(model.f(x), float), model.g_mat(x)
    prob = QpProblem(kappa(x, v), rho(v), cfg.eta, sf.assemble(x, v).qp_rows, sf.u_lo, sf.u_hi)

    def qp(backend):
        solver = QpSolver(warm_start=False, backend=backend)
        return lambda: solver.solve(prob)

    return {
        "flow + sensitivities (T = 10)": lambda b: lambda: integrate_flow(model, x, v, cfg.T, cfg.integrator, backend=b),
        "plant step (1 ms)": lambda b: lambda: propagate_plant(model, x, np.array([1.0]), 1e-3, backend=b),
        f"path rows ({delta.size})": lambda b: lambda: linear_rows(cmap.Cx, bundle.sx, bundle.sv, cmap.Cv, delta,
                                                                   100.0, fx, gx, backend=b),
        f"qp cold solve ({len(prob.rows)} rows)": qp,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    logging.disable(logging.WARNING)
    backends = _backend.available_backends()
    if "compiled" not in backends:
        print("compiled core not built; only the Python fallback is available")
    print(f"{'kernel':34s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, make in cases().items():
        times = []
        for b in backends:
            fn = make(b)
            number = max(1, int(0.2 / max(timeit.timeit(fn, number=1), 1e-7)))
            best = min(timeit.repeat(fn, number=number, repeat=args.repeat)) / number
            times.append(best)
        row = f"{name:34s}" + "".join(f"{1e3 * t:11.4f} ms" for t in times)
        if len(times) > 1:
            row += f"   {times[1] / times[0]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
