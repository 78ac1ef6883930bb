"""``dsmcbf`` command line: simulate scenarios, run property suites, dump diagnostics.

Exit codes: 0 success, 1 unreadable or invalid scenario, 2 constraint
violation or failed suite, 3 infeasible start.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .filter import Scenario, StartupError, simulate
from .flow import integrate_flow, lemma1_residual

EXIT_OK, EXIT_INPUT, EXIT_VIOLATION, EXIT_STARTUP = 0, 1, 2, 3
VIOLATION_TOL = 1e-4

log = logging.getLogger("dsmcbf")


class InputError(Exception):
    pass


def load_scenario(path: str, overrides=()) -> Scenario:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read scenario {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    try:
        return Scenario.from_dict(doc).with_overrides(overrides)
    except (TypeError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: invalid scenario: {exc}") from None


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, default=_json_default)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario, args.set)
    try:
        trace = simulate(sc)
    except StartupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    if args.out:
        trace.to_csv(args.out, timing=args.timing)
    model = sc.build()[0]
    final = float(np.max(np.abs(trace.x[-1] - model.x_bar(np.asarray(sc.r, float)))))
    summary = {"ticks": len(trace), "min_margin": trace.min_margin, "final_error": final,
               "fallbacks": trace.fallback_count}
    print(f"ticks            {summary['ticks']}")
    print(f"min margin       {summary['min_margin']:.6g}")
    print(f"final |x - x_bar(r)|  {final:.6g}")
    print(f"fallbacks        {summary['fallbacks']}")
    if summary["min_margin"] < -VIOLATION_TOL:
        print(f"error: constraint violated by {-summary['min_margin']:.3g}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    report = verify.run_suites(names, seed=args.seed)
    for name, rep in report["suites"].items():
        print(f"{name:12s} {'PASS' if rep['passed'] else 'FAIL'}  ({rep['seconds']:.1f} s)")
    _write_json(report, args.out)
    return EXIT_OK if report["passed"] else EXIT_VIOLATION


def cmd_sensitivity(args) -> int:
    from .verify import fd_sensitivities

    sc = load_scenario(args.scenario, args.set)
    model, _, sf, _, _, x0, v0 = sc.build()
    T = sf.cfg.T
    bundle = integrate_flow(model, x0, v0, T, sf.cfg.integrator)
    if args.out:
        bundle.to_csv(args.out)
    Sx_fd, Sv_fd = fd_sensitivities(model, x0, v0, T)
    rel = lambda a, b: float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))  # noqa: E731
    report = {"grid_points": len(bundle), "lemma1_residual": lemma1_residual(bundle, model, x0, v0),
              "sx_rel_err": rel(bundle.sx[-1], Sx_fd), "sv_rel_err": rel(bundle.sv[-1], Sv_fd)}
    print(_write_json(report, None))
    ok = report["sx_rel_err"] <= 1e-3 and report["sv_rel_err"] <= 1e-3 and report["lemma1_residual"] <= 1e-6
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_dump_qp(args) -> int:
    sc = load_scenario(args.scenario, args.set)
    tick = args.tick
    if tick > 0:
        sc = sc.with_overrides([f"t_end={tick * sc.control_dt!r}"])
    captured = {}

    def grab(k, x, v, out):
        if k == tick:
            captured["problem"] = out.problem
            captured["status"] = out.qp_status
            captured["state"] = (x.tolist(), v.tolist())

    try:
        simulate(sc, on_step=grab)
    except StartupError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    doc = captured["problem"].to_dict()
    doc["tick"] = tick
    doc["status"] = captured["status"]
    doc["x"], doc["v"] = captured["state"]
    text = _write_json(doc, args.out)
    if not args.out:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsmcbf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required, help="scenario JSON file")
        p.add_argument("--out", help="output file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override into the scenario (repeatable)")

    p = sub.add_parser("simulate", help="run a scenario and write its trace as CSV")
    common(p)
    p.add_argument("--timing", action="store_true", help="record wall-clock solve times in the CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run a property suite and write a JSON report")
    common(p, scenario_required=False)
    p.add_argument("--suite", default="all", choices=["all", "qp", "sensitivity", "invariance", "terminal"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sensitivity-check", help="dump the flow and sensitivities at the scenario start")
    common(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("dump-qp", help="write the filter QP of one tick as JSON")
    common(p)
    p.add_argument("--tick", type=int, default=0)
    p.set_defaults(func=cmd_dump_qp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
