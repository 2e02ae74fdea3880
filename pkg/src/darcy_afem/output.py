"""CSV and legacy-VTK export of level summaries, traces and fields.

All floating-point output uses 17 significant digits so repeated runs diff
bit-identically and every reported quantity can be re-derived from the dumped
fields.  The VTK writer emits ASCII unstructured grids (point data for the
velocity, pressure and concentration, cell data for the per-element
indicators) viewable in any of the usual tools.
"""

from __future__ import annotations

import numpy as np

from .adapt import LevelRecord
from .estimator import IndicatorTable
from .fem_core import DofMap


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.17g}"


LEVEL_COLUMNS = ["level", "vertices", "triangles", "dof", "eta_L", "eta_D",
                 "eta_L_l2", "eta_D_l2", "picard_iters", "stop_reason", "marked"]
MANUFACTURED_COLUMNS = ["err_u_L3", "err_p_W13_2", "err_C_H1", "Err", "EI", "rate"]
CAVITY_COLUMNS = ["E_tot"]


def write_levels_csv(path, rows: list[dict]) -> None:
    """``rows`` are per-level dicts keyed by the column names; a quantity a
    case does not define is simply absent from its header."""
    if not rows:
        columns = LEVEL_COLUMNS
    else:
        columns = [c for c in LEVEL_COLUMNS + MANUFACTURED_COLUMNS + CAVITY_COLUMNS
                   if c in rows[0]]
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def level_row(record: LevelRecord, eta_l_l2: float, eta_d_l2: float) -> dict:
    return {
        "level": record.level,
        "vertices": record.n_vertices,
        "triangles": record.n_triangles,
        "dof": record.n_dof,
        "eta_L": record.eta_L,
        "eta_D": record.eta_D,
        "eta_L_l2": eta_l_l2,
        "eta_D_l2": eta_d_l2,
        "picard_iters": record.picard_iterations,
        "stop_reason": record.stop_reason,
        "marked": record.n_marked,
    }


def write_trace_csv(path, rows: list[tuple]) -> None:
    """Per-Picard-iteration rows: (level, iteration, eta_L, eta_D, ratio,
    flow_iterations, transport_iterations)."""
    with open(path, "w") as f:
        f.write("level,iteration,eta_L,eta_D,ratio,flow_iters,transport_iters\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def write_vtk(path, mesh, dofmap: DofMap, state, table: IndicatorTable | None = None,
              title: str = "flow-transport fields") -> None:
    """Legacy-ASCII unstructured grid with vertex fields and, when an
    indicator table is given, per-element cell data.

    The bubble parts vanish at the vertices, so the vertex velocity values
    are exact point evaluations of the discrete field.
    """
    state.check_on(dofmap)
    n_v = mesh.n_vertices
    n_t = mesh.n_triangles
    u_x = state.u[:n_v]
    u_y = state.u[dofmap.velocity_stride:dofmap.velocity_stride + n_v]
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(title + "\n")
        f.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {n_v} double\n")
        for x, y in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g} 0\n")
        f.write(f"CELLS {n_t} {4 * n_t}\n")
        for a, b, c in mesh.triangles:
            f.write(f"3 {a} {b} {c}\n")
        f.write(f"CELL_TYPES {n_t}\n")
        f.write("5\n" * n_t)
        f.write(f"POINT_DATA {n_v}\n")
        f.write("VECTORS velocity double\n")
        for vx, vy in zip(u_x, u_y):
            f.write(f"{vx:.17g} {vy:.17g} 0\n")
        for name, values in (("pressure", state.p), ("concentration", state.c)):
            f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
            for v in values:
                f.write(f"{v:.17g}\n")
        if table is not None:
            f.write(f"CELL_DATA {n_t}\n")
            fields = (("eta_L1", table.eta_L1), ("eta_L2", table.eta_L2),
                      ("eta_D1", table.eta_D1), ("eta_D2", table.eta_D2),
                      ("eta_D3", table.eta_D3), ("eta_D_elem", table.eta_D_elem))
            for name, values in fields:
                f.write(f"SCALARS {name} double\nLOOKUP_TABLE default\n")
                for v in values:
                    f.write(f"{v:.17g}\n")
