"""Safety filters built from trajectory-based dynamic safety margins.

A prestabilizing policy ``pi(x, v)`` and its predicted trajectories turn
state and input constraints into control barrier rows, which a small QP
enforces around a nominal controller.
"""
from ._backend import BACKEND, available_backends
from .dsm import CbfRow, RowBlock, eval_dsm, path_rows
from .filter import (FilterConfig, FilterInfeasible, Scenario, SafetyFilter, SimTrace, StartupError,
                     paper_scenario, simulate)
from .flow import FlowBundle, IntegratorConfig, integrate_flow, propagate_plant
from .model import AffineConstraintMap, AlphaFn, ConstraintMap, SystemModel, affine_model
from .pendulum import PendulumParams, make_pendulum_model, pendulum_constraints
from .qp import QpProblem, QpSolution, QpSolver, solve
from .terminal import QuadraticTerminalDsm, build_terminal, eval_terminal, terminal_rows

__version__ = "0.1.0"
