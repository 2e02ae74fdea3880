"""Damped Picard iteration with the linearization/discretization stopping rule.

One iteration solves the flow step around the previous iterate, then the
transport step with the fresh velocity.  After each iteration the five
per-element indicators are aggregated into the global pair
``(eta_L, eta_D)`` and the loop stops as soon as

    eta_L <= gamma_bar * eta_D,

i.e. once the linearization error no longer dominates the discretization
error.  The trace keeps the final iterate pair so the stop decision can be
recomputed independently from returned data alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assembly import (DiscreteState, PhysicalParams, ProblemData,
                       assemble_darcy_step, assemble_transport_step)
from .errors import ConfigurationError, SolverError
from .estimator import IndicatorTable, compute_indicators, stopping
from .linsolve import SolveReport, gmres_solve

ASSEMBLY_DEGREE = 6


@dataclass(frozen=True)
class PicardConfig:
    """Knobs of the fixed-point loop and its inner linear solves."""

    gamma_bar: float = 0.01
    max_iterations: int = 50
    solver_tol: float = 1e-10
    solver_restart: int = 100
    solver_max_iter: int = 5000
    aggregation: str = "paper"

    def __post_init__(self):
        if not (0.0 < self.gamma_bar < 1.0):
            raise ConfigurationError(
                f"gamma_bar must lie strictly between 0 and 1, got {self.gamma_bar!r}")
        if self.max_iterations < 1:
            raise ConfigurationError(
                f"max_iterations must be at least 1, got {self.max_iterations!r}")


@dataclass(frozen=True)
class TraceRow:
    """Per-iteration record: indicators and inner-solver effort."""

    iteration: int
    eta_L: float
    eta_D: float
    ratio: float
    flow_iterations: int
    transport_iterations: int


@dataclass
class IterationTrace:
    """History of one Picard run plus the data needed to audit its stop.

    ``prev_state``/``final_state`` are the iterate pair of the last completed
    iteration, and ``table`` its indicator table; recomputing the indicators
    from that pair must reproduce the recorded stop decision.
    """

    rows: list = field(default_factory=list)
    stop_reason: str = ""
    prev_state: Optional[DiscreteState] = None
    final_state: Optional[DiscreteState] = None
    table: Optional[IndicatorTable] = None

    @property
    def iterations(self) -> int:
        return len(self.rows)


def picard_step(mesh, dofmap, params: PhysicalParams, data: ProblemData,
                state_i: DiscreteState,
                config: PicardConfig = PicardConfig()) -> tuple[DiscreteState, SolveReport, SolveReport]:
    """One damped iteration: flow solve around ``state_i``, then transport.

    Raises :class:`SolverError` carrying the offending report if either
    linear solve fails to reach its verified residual tolerance.
    """
    state_i.check_on(dofmap)

    flow = assemble_darcy_step(mesh, dofmap, params, data, state_i,
                               quad_degree=ASSEMBLY_DEGREE)
    x, flow_report = gmres_solve(flow, tol=config.solver_tol,
                                 restart=config.solver_restart,
                                 max_iter=config.solver_max_iter)
    if not flow_report.converged:
        err = SolverError(
            f"flow solve stalled at relative residual "
            f"{flow_report.relative_residual:.3e} after {flow_report.iterations} iterations")
        err.report = flow_report
        raise err
    u_new = x[:dofmap.n_velocity]
    p_new = x[dofmap.n_velocity:dofmap.n_velocity + dofmap.n_pressure]

    transport = assemble_transport_step(mesh, dofmap, params, data, u_new,
                                        quad_degree=ASSEMBLY_DEGREE)
    c_new, transport_report = gmres_solve(transport, tol=config.solver_tol,
                                          restart=config.solver_restart,
                                          max_iter=config.solver_max_iter)
    if not transport_report.converged:
        err = SolverError(
            f"transport solve stalled at relative residual "
            f"{transport_report.relative_residual:.3e} after {transport_report.iterations} iterations")
        err.report = transport_report
        raise err
    # The identity rows pin the boundary values only up to the solver
    # residual; reimpose them so boundary data survives bitwise.
    c_new = np.where(dofmap.dirichlet_mask, dofmap.dirichlet_values, c_new)

    state = DiscreteState(u=u_new, p=p_new, c=c_new,
                          mesh_generation=state_i.mesh_generation)
    return state, flow_report, transport_report


def run_to_convergence(mesh, dofmap, params: PhysicalParams, data: ProblemData,
                       state_0: Optional[DiscreteState] = None,
                       config: PicardConfig = PicardConfig()) -> tuple[DiscreteState, IterationTrace]:
    """Iterate from ``state_0`` (zero start by default) until the stopping
    criterion fires or ``max_iterations`` is exhausted.

    Hitting the iteration cap is reported through ``stop_reason``
    ("max-iterations"), not raised: on a coarse mesh a stagnating ratio is
    data, not failure.
    """
    if state_0 is None:
        state_0 = DiscreteState.zeros(dofmap)
    state_0.check_on(dofmap)

    trace = IterationTrace()
    prev = state_0
    for iteration in range(1, config.max_iterations + 1):
        nxt, flow_report, transport_report = picard_step(
            mesh, dofmap, params, data, prev, config)
        table = compute_indicators(mesh, dofmap, params, data, prev, nxt,
                                   aggregation=config.aggregation)
        if table.eta_D > 0.0:
            ratio = table.eta_L / table.eta_D
        else:
            ratio = 0.0 if table.eta_L == 0.0 else float("inf")
        trace.rows.append(TraceRow(iteration=iteration, eta_L=table.eta_L,
                                   eta_D=table.eta_D, ratio=ratio,
                                   flow_iterations=flow_report.iterations,
                                   transport_iterations=transport_report.iterations))
        trace.prev_state = prev
        trace.final_state = nxt
        trace.table = table
        if stopping(table.eta_L, table.eta_D, config.gamma_bar):
            trace.stop_reason = "criterion-met"
            return nxt, trace
        prev = nxt
    trace.stop_reason = "max-iterations"
    return trace.final_state, trace
