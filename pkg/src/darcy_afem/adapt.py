"""Estimate-mark-refine loop: Dorfler marking, bisection, state transfer.

Each level runs the Picard loop to its stopping criterion, records the
aggregated indicators, and either stops (discretization estimate below the
tolerance, marking came back empty, or the level budget is spent) or marks a
bulk set of elements by the discretization indicator and bisects them.  The
converged fields are carried to the refined mesh as a warm start: vertex
values are interpolated linearly (new vertices sit at edge midpoints),
bubbles restart at zero, pressure is recentred to mean zero and boundary
values of the concentration are reimposed from the new mesh's trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import mesh as meshmod
from .assembly import DiscreteState, PhysicalParams, ProblemData
from .errors import ConfigurationError
from .estimator import IndicatorTable
from .fem_core import DofMap, build_dofmap
from .picard import IterationTrace, PicardConfig, run_to_convergence


@dataclass(frozen=True)
class AdaptConfig:
    """Marking fraction, stopping tolerance and level budget of the loop."""

    theta: float = 0.5
    eps_tol: float = 1e-8
    max_levels: int = 10
    uniform_mode: bool = False

    def __post_init__(self):
        if not (0.0 < self.theta <= 1.0):
            raise ConfigurationError(f"theta must lie in (0, 1], got {self.theta!r}")
        if not self.eps_tol > 0.0:
            raise ConfigurationError(f"eps_tol must be positive, got {self.eps_tol!r}")
        if self.max_levels < 1:
            raise ConfigurationError(f"max_levels must be at least 1, got {self.max_levels!r}")


@dataclass
class LevelRecord:
    """Summary of one refinement level; error metrics are filled by callers
    that know an exact solution (they stay NaN otherwise)."""

    level: int
    n_vertices: int
    n_triangles: int
    n_dof: int
    eta_L: float
    eta_D: float
    picard_iterations: int
    stop_reason: str
    n_marked: int = 0
    tolerance_met: bool = False
    err_u_L3: float = float("nan")
    err_p_W13_2: float = float("nan")
    err_c_H1: float = float("nan")
    err_rel: float = float("nan")
    effectivity: float = float("nan")
    e_tot: float = float("nan")


@dataclass(frozen=True)
class LevelState:
    """Everything computed on one level, kept for export and post-processing."""

    level: int
    mesh: object
    dofmap: DofMap
    state: DiscreteState
    trace: IterationTrace
    table: IndicatorTable


def mark_dorfler(eta_elem: np.ndarray, theta: float) -> set[int]:
    """Smallest element set whose squared indicators carry a theta^2 share.

    Elements are taken greedily in descending indicator order (ties by
    element index), so the returned set is minimal: dropping its weakest
    member falls below the bulk threshold.  An all-zero table marks nothing.
    """
    if not (0.0 < theta <= 1.0):
        raise ConfigurationError(f"theta must lie in (0, 1], got {theta!r}")
    eta_elem = np.asarray(eta_elem, dtype=float)
    squares = eta_elem**2
    total = squares.sum()
    if total <= 0.0:
        return set()
    order = np.argsort(-eta_elem, kind="stable")
    running = np.cumsum(squares[order])
    # Slight slack so an exact theta^2 share is not missed to round-off.
    target = theta * theta * total * (1.0 - 1e-12)
    count = int(np.searchsorted(running, target)) + 1
    return {int(i) for i in order[:count]}


def transfer_state(state: DiscreteState, dofmap: DofMap, refinement: meshmod.Refinement,
                   fine_mesh: meshmod.Mesh, fine_dofmap: DofMap) -> DiscreteState:
    """Carry a coarse state to the bisected mesh as a warm start."""
    state.check_on(dofmap)
    n_coarse = refinement.n_coarse_vertices
    a = refinement.new_vertex_endpoints[:, 0]
    b = refinement.new_vertex_endpoints[:, 1]

    def lift(values: np.ndarray) -> np.ndarray:
        return np.concatenate([values, 0.5 * (values[a] + values[b])])

    u = np.zeros(fine_dofmap.n_velocity)
    for comp in range(2):
        coarse = state.u[comp * dofmap.velocity_stride:
                         comp * dofmap.velocity_stride + n_coarse]
        offset = comp * fine_dofmap.velocity_stride
        u[offset:offset + fine_dofmap.n_vertices] = lift(coarse)

    p = lift(state.p)
    weights = np.zeros(fine_mesh.n_vertices)
    np.add.at(weights, fine_mesh.triangles.ravel(),
              np.repeat(fine_mesh.areas / 3.0, 3))
    p -= (weights @ p) / weights.sum()

    c = lift(state.c)
    c = np.where(fine_dofmap.dirichlet_mask, fine_dofmap.dirichlet_values, c)
    return DiscreteState(u=u, p=p, c=c, mesh_generation=fine_mesh.generation)


def adaptive_loop(initial_mesh: meshmod.Mesh, params: PhysicalParams, data: ProblemData,
                  picard_config: PicardConfig = PicardConfig(),
                  adapt_config: AdaptConfig = AdaptConfig(),
                  on_level: Optional[Callable[[LevelRecord, LevelState], None]] = None,
                  ) -> tuple[list[LevelRecord], list[LevelState]]:
    """Run the full loop from ``initial_mesh``; returns per-level records and
    the retained level states.

    In uniform mode every level applies two mark-everything sweeps (each
    triangle splits into four).  A level whose Picard loop hits its iteration
    cap is recorded with that stop reason and refinement continues.
    """
    current = initial_mesh
    dofmap = build_dofmap(current, data.concentration_boundary)
    state = DiscreteState.zeros(dofmap)

    records: list[LevelRecord] = []
    states: list[LevelState] = []
    for level in range(adapt_config.max_levels):
        state, trace = run_to_convergence(current, dofmap, params, data,
                                          state_0=state, config=picard_config)
        table = trace.table
        record = LevelRecord(
            level=level,
            n_vertices=current.n_vertices,
            n_triangles=current.n_triangles,
            n_dof=dofmap.n_velocity + dofmap.n_pressure + dofmap.n_concentration,
            eta_L=table.eta_L,
            eta_D=table.eta_D,
            picard_iterations=trace.iterations,
            stop_reason=trace.stop_reason,
        )
        records.append(record)
        level_state = LevelState(level=level, mesh=current, dofmap=dofmap,
                                 state=state, trace=trace, table=table)
        states.append(level_state)

        if table.eta_D < adapt_config.eps_tol:
            record.tolerance_met = True
        elif level < adapt_config.max_levels - 1:
            if adapt_config.uniform_mode:
                marked = set(range(current.n_triangles))
            else:
                marked = mark_dorfler(table.eta_D_elem, adapt_config.theta)
            record.n_marked = len(marked)
            if marked:
                current, refinement = meshmod.refine(current, marked)
                fine_dofmap = build_dofmap(current, data.concentration_boundary)
                state = transfer_state(state, dofmap, refinement, current, fine_dofmap)
                dofmap = fine_dofmap
                if adapt_config.uniform_mode:
                    current, refinement = meshmod.refine(
                        current, set(range(current.n_triangles)))
                    fine_dofmap = build_dofmap(current, data.concentration_boundary)
                    state = transfer_state(state, dofmap, refinement, current, fine_dofmap)
                    dofmap = fine_dofmap

        if on_level is not None:
            on_level(record, level_state)
        if record.tolerance_met or (record.n_marked == 0 and level < adapt_config.max_levels - 1):
            break
    return records, states
