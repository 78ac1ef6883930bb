"""The online safety filter and the sampled-data closed-loop simulator.

Each control tick integrates the prestabilized flow and its sensitivities
from the current ``(x, v)``, turns every grid sample of every constraint
(plus the terminal margin at ``Phi(T)``) into a linear row in ``(u, w)``,
and solves

    min ||u - kappa||^2 + eta ||w - rho||^2   s.t. rows, u in U.

When the QP fails, the filter returns the backup pair ``(pi(x, v), 0)``.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dsm import DsmEvaluation, RowBlock, eval_dsm, path_rows
from .flow import FlowBundle, IntegratorConfig, integrate_flow, propagate_plant
from .model import AlphaFn, ConstraintMap, SystemModel, _as_vec, get_factory
from .qp import OPTIMAL, QpProblem, QpSolver
from .terminal import QuadraticTerminalDsm, build_terminal, eval_terminal, omitted_terminal, terminal_rows
from . import pendulum as _pendulum  # noqa: F401  (registers "pendulum-cart")

log = logging.getLogger(__name__)


class StartupError(RuntimeError):
    """The initial condition lies outside the safe set."""


class FilterInfeasible(RuntimeError):
    """Raised in ``fallback="error"`` mode; carries the offending QP as JSON."""

    def __init__(self, message: str, problem: QpProblem):
        super().__init__(message)
        self.problem = problem
        self.problem_json = problem.to_json()


@dataclass(frozen=True)
class FilterConfig:
    T: float = 10.0
    alpha_path: AlphaFn = AlphaFn(100.0)
    alpha_terminal: AlphaFn = AlphaFn(400.0)
    eta: float = 0.1
    integrator: IntegratorConfig = IntegratorConfig()
    fallback: str = "on"  # "on" | "error"
    screen: float = math.inf
    terminal_enabled: bool = True
    terminal_rebuild_per_v: bool = False
    warm_start: bool = True
    state_rows: str = "diagnose"  # "diagnose" | "enforce"

    def __post_init__(self):
        if self.state_rows not in ("diagnose", "enforce"):
            raise ValueError("state_rows must be 'diagnose' or 'enforce'")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.fallback not in ("on", "error"):
            raise ValueError("fallback must be 'on' or 'error'")


@dataclass
class Assembly:
    """Everything computed at one tick before the QP solve.

    ``rows`` holds every assembled row.  Rows whose coefficients on
    ``(u, w)`` are all exactly zero are conditions on the current state
    alone; no decision can change them, so by default they are split off
    into ``state_rows`` and reported through :attr:`state_residual`
    instead of being handed to the QP.
    """

    bundle: FlowBundle
    dsm: DsmEvaluation
    terminal_values: np.ndarray
    rows: RowBlock
    qp_rows: RowBlock
    state_rows: RowBlock

    @property
    def state_residual(self) -> float:
        """Largest violation among the decision-independent rows (0 when all hold)."""
        return float(np.max(self.state_rows.r, initial=0.0))


@dataclass
class FilterOutput:
    u: np.ndarray
    w: np.ndarray
    delta1: float  # min over constraints of the path margin
    delta_T: float  # min terminal component (inf when the terminal set is omitted)
    qp_status: str
    used_fallback: bool
    timing: float  # seconds spent in the whole step
    state_residual: float = 0.0
    problem: Optional[QpProblem] = None
    assembly: Optional[Assembly] = None


class SafetyFilter:
    def __init__(self, model: SystemModel, cmap: ConstraintMap, cfg: FilterConfig | None = None, *,
                 v0=None, terminal: QuadraticTerminalDsm | None = None, u_lo=None, u_hi=None,
                 solver=None):
        self.model = model
        self.cmap = cmap
        self.cfg = cfg or FilterConfig()
        d = model.dims
        if terminal is None:
            if self.cfg.terminal_enabled:
                v0 = np.zeros(d.l) if v0 is None else v0
                terminal = build_terminal(model, cmap, v0, rebuild_per_v=self.cfg.terminal_rebuild_per_v)
            else:
                terminal = omitted_terminal(model)
        self.terminal = terminal
        box = model.meta.get("u_box", (None, None))
        self.u_lo = np.full(d.m, -np.inf) if (u_lo if u_lo is not None else box[0]) is None \
            else np.broadcast_to(np.asarray(u_lo if u_lo is not None else box[0], float), (d.m,)).copy()
        self.u_hi = np.full(d.m, np.inf) if (u_hi if u_hi is not None else box[1]) is None \
            else np.broadcast_to(np.asarray(u_hi if u_hi is not None else box[1], float), (d.m,)).copy()
        self.solver = solver or QpSolver(warm_start=self.cfg.warm_start)
        self.fallback_count = 0

    def assemble(self, x, v) -> Assembly:
        cfg = self.cfg
        bundle = integrate_flow(self.model, x, v, cfg.T, cfg.integrator)
        dsm = eval_dsm(bundle, self.cmap, v)
        fg = (np.asarray(self.model.f(x), float), self.model.g_mat(x))
        rows = path_rows(bundle, self.model, self.cmap, x, v, cfg.alpha_path, cfg.screen, dsm, fg)
        if self.terminal.enabled:
            ev = eval_terminal(self.terminal, bundle.phi[-1], v)
            tvals = ev[0]
            trows = terminal_rows(self.terminal, bundle, self.model, x, v, cfg.alpha_terminal, ev, fg)
            rows = RowBlock.concat([rows, trows])
        else:
            tvals = np.zeros(0)
        if cfg.state_rows == "enforce":
            qp_rows, state = rows, rows.select(np.zeros(len(rows), bool))
        else:
            free = ~(rows.a_u.any(axis=1) | rows.a_w.any(axis=1))
            if free.any():
                qp_rows, state = rows.select(~free), rows.select(free)
            else:
                qp_rows, state = rows, rows.select(free)
        return Assembly(bundle, dsm, tvals, rows, qp_rows, state)

    def backup(self, x, v):
        u = np.clip(np.atleast_1d(self.model.pi(x, v)).astype(float), self.u_lo, self.u_hi)
        return u, np.zeros(self.model.dims.l)

    def step(self, x, v, kappa_u, rho_w) -> FilterOutput:
        t0 = time.perf_counter()
        d = self.model.dims
        x = _as_vec(x, d.n, "x")
        v = _as_vec(v, d.l, "v")
        asm = self.assemble(x, v)
        prob = QpProblem(_as_vec(kappa_u, d.m, "kappa"), _as_vec(rho_w, d.l, "rho"), self.cfg.eta,
                         asm.qp_rows, self.u_lo, self.u_hi)
        sol = self.solver.solve(prob)
        delta1 = float(np.min(asm.dsm.delta1))
        delta_T = float(np.min(asm.terminal_values)) if asm.terminal_values.size else math.inf
        if sol.status == OPTIMAL:
            u, w, fb = sol.u, sol.w, False
        else:
            if self.cfg.fallback == "error":
                raise FilterInfeasible(f"QP {sol.status} at x={x.tolist()}, v={v.tolist()}", prob)
            self.fallback_count += 1
            log.warning("QP %s; applying backup policy (fallback #%d)", sol.status, self.fallback_count)
            u, w = self.backup(x, v)
            fb = True
        return FilterOutput(u, w, delta1, delta_T, sol.status, fb, time.perf_counter() - t0,
                            asm.state_residual, prob, asm)


# ---------------------------------------------------------------------------
# Scenarios


_FILTER_KEYS = {"T", "alpha_path", "eta", "fallback", "screen", "warm_start", "integrator", "terminal",
                "state_rows"}
_TOP_KEYS = {"model", "params", "x0", "v0", "r", "nominal", "navigation", "t_end", "control_dt", "filter"}


@dataclass
class Scenario:
    """A closed-loop experiment, serializable as JSON.

    ``nominal.kind`` selects ``kappa``: ``"state_feedback"`` is
    ``u_bar(r) - K (x - x_bar(r))`` (``gain`` null means the model default),
    ``"backup"`` is the frozen backup policy ``pi(x, v0)``.  The navigation
    field is ``rho(v) = gain (r - v)``.
    """

    model: str = "pendulum-cart"
    params: dict = field(default_factory=dict)
    x0: list = field(default_factory=lambda: [0.0, math.pi, 0.0, 0.0])
    v0: list = field(default_factory=lambda: [0.0])
    r: list = field(default_factory=lambda: [4.0])
    nominal: dict = field(default_factory=lambda: {"kind": "state_feedback", "gain": None})
    navigation: dict = field(default_factory=lambda: {"gain": 1.0})
    t_end: float = 15.0
    control_dt: float = 0.001
    filter: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if not self.control_dt > 0:
            raise ValueError("control_dt must be positive")
        unknown = set(self.filter) - _FILTER_KEYS
        if unknown:
            raise ValueError(f"unknown filter keys: {sorted(unknown)}")
        if self.nominal.get("kind", "state_feedback") not in ("state_feedback", "backup"):
            raise ValueError(f"unknown nominal kind {self.nominal.get('kind')!r}")

    # -- serialization
    def to_dict(self) -> dict:
        return copy.deepcopy({k: getattr(self, k) for k in
                              ("model", "params", "x0", "v0", "r", "nominal", "navigation",
                               "t_end", "control_dt", "filter")})

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        if not isinstance(doc, dict):
            raise ValueError("scenario document must be a JSON object")
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        doc = copy.deepcopy(doc)
        for key in ("x0", "v0", "r"):
            if key in doc and not isinstance(doc[key], list):
                doc[key] = [doc[key]]
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def with_overrides(self, pairs) -> "Scenario":
        """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
        doc = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep or not key:
                raise ValueError(f"override {pair!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = doc
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ValueError(f"override path {key!r} crosses a non-object")
            node[parts[-1]] = value
        return Scenario.from_dict(doc)

    # -- construction
    def filter_config(self) -> FilterConfig:
        f = self.filter
        term = f.get("terminal", {})
        integ = f.get("integrator", {})
        screen = f.get("screen")
        return FilterConfig(
            T=float(f.get("T", 10.0)),
            alpha_path=AlphaFn(np.asarray(f.get("alpha_path", 100.0), float)),
            alpha_terminal=AlphaFn(np.asarray(term.get("alpha_gain", 400.0), float)),
            eta=float(f.get("eta", 0.1)),
            integrator=IntegratorConfig(**integ),
            fallback=f.get("fallback", "on"),
            screen=math.inf if screen is None else float(screen),
            terminal_enabled=bool(term.get("enabled", True)),
            terminal_rebuild_per_v=bool(term.get("rebuild_per_v", False)),
            warm_start=bool(f.get("warm_start", True)),
            state_rows=f.get("state_rows", "diagnose"),
        )

    def build(self):
        """Return ``(model, cmap, filter, kappa, rho)``."""
        model, cmap, _ = get_factory(self.model)(self.params)
        d = model.dims
        x0 = _as_vec(self.x0, d.n, "x0")
        v0 = _as_vec(self.v0, d.l, "v0")
        r = _as_vec(self.r, d.l, "r")
        sf = SafetyFilter(model, cmap, self.filter_config(), v0=v0)
        kind = self.nominal.get("kind", "state_feedback")
        if kind == "backup":
            def kappa(x, v):
                return np.atleast_1d(model.pi(x, v0)).astype(float)
        else:
            gain = self.nominal.get("gain")
            K = np.asarray(model.meta["nominal_gain"] if gain is None else gain, float).reshape(d.m, d.n)
            xr = np.asarray(model.x_bar(r), float)
            ur = np.atleast_1d(model.u_bar(r)).astype(float)

            def kappa(x, v):
                return ur - K @ (x - xr)
        nav = float(self.navigation.get("gain", 1.0))

        def rho(v):
            return nav * (r - v)

        return model, cmap, sf, kappa, rho, x0, v0


def paper_scenario() -> Scenario:
    """The cart-pendulum transfer from ``x_bar(0)`` to ``x_bar(4)``."""
    return Scenario(
        model="pendulum-cart",
        params={},
        x0=[0.0, math.pi, 0.0, 0.0],
        v0=[0.0],
        r=[4.0],
        nominal={"kind": "state_feedback", "gain": None},
        navigation={"gain": 1.0},
        t_end=15.0,
        control_dt=0.001,
        filter={"T": 10.0, "alpha_path": 100.0, "eta": 0.1, "fallback": "on",
                "terminal": {"enabled": True, "alpha_gain": 400.0, "rebuild_per_v": False}},
    )


# ---------------------------------------------------------------------------
# Simulation


@dataclass
class SimTrace:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    u: np.ndarray
    w: np.ndarray
    delta1: np.ndarray
    deltaT: np.ndarray
    qp_status: list
    used_fallback: np.ndarray
    solve_ms: np.ndarray
    margins: np.ndarray  # c(x(t), v(t)) at every tick, shape (N+1, p)

    def __len__(self):
        return len(self.t)

    @property
    def fallback_count(self) -> int:
        return int(np.sum(self.used_fallback))

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins))

    def header(self) -> list[str]:
        n, l, m = self.x.shape[1], self.v.shape[1], self.u.shape[1]
        return (["t"] + [f"x{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(l)]
                + [f"u{i + 1}" for i in range(m)] + [f"w{i + 1}" for i in range(l)]
                + ["delta1", "deltaT", "qp_status", "used_fallback", "solve_ms"])

    def to_csv(self, path, timing: bool = False) -> None:
        """Write the trace.  ``solve_ms`` is ``nan`` unless ``timing`` so output is reproducible."""
        with open(path, "w") as fh:
            fh.write(",".join(self.header()) + "\n")
            for k in range(len(self)):
                nums = [self.t[k], *self.x[k], *self.v[k], *self.u[k], *self.w[k],
                        self.delta1[k], self.deltaT[k]]
                cells = [repr(float(a)) for a in nums]
                cells += [self.qp_status[k], str(int(self.used_fallback[k])),
                          repr(float(self.solve_ms[k])) if timing else "nan"]
                fh.write(",".join(cells) + "\n")


def simulate(scenario: Scenario, progress: Optional[Callable[[int, int], None]] = None,
             on_step: Optional[Callable[[int, np.ndarray, np.ndarray, FilterOutput], None]] = None) -> SimTrace:
    """Run the scenario under zero-order hold; one trace row per control tick.

    ``on_step(k, x, v, out)`` sees every filter output, assembly included.
    """
    model, cmap, sf, kappa, rho, x, v = scenario.build()
    dt = scenario.control_dt
    N = int(round(scenario.t_end / dt))
    start = sf.assemble(x, v)
    d1 = float(np.min(start.dsm.delta1))
    dT = float(np.min(start.terminal_values, initial=math.inf))
    if d1 < 0 or dT < 0:
        raise StartupError(f"initial margin negative: delta1={d1:.6g}, deltaT={dT:.6g}")
    rows = []
    for k in range(N + 1):
        out = sf.step(x, v, kappa(x, v), rho(v))
        rows.append((k * dt, x, v, out.u, out.w, out.delta1, out.delta_T, out.qp_status,
                     out.used_fallback, 1e3 * out.timing, cmap.c(x, v)))
        if on_step is not None:
            on_step(k, x, v, out)
        if progress is not None:
            progress(k, N)
        if k == N:
            break
        x = propagate_plant(model, x, out.u, dt)
        v = v + out.w * dt
    cols = list(zip(*rows))
    return SimTrace(
        t=np.array(cols[0]), x=np.array(cols[1]), v=np.array(cols[2]), u=np.array(cols[3]),
        w=np.array(cols[4]), delta1=np.array(cols[5]), deltaT=np.array(cols[6]),
        qp_status=list(cols[7]), used_fallback=np.array(cols[8], bool),
        solve_ms=np.array(cols[9]), margins=np.array(cols[10]),
    )
