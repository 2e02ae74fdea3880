"""Assembly of the damped Picard flow step and the transport step.

The flow step solves, given the previous iterate ``(u^i, C^i)``,

    gamma (u, v) + (mu/rho)(K^-1 u, v) + (beta/rho)(|u^i| u, v) + (grad p, v)
        = gamma (u^i, v) + (f0 + f1(C^i), v)        for all v,
    (grad q, u) = 0                                 for all q,

with one scalar multiplier row enforcing the zero mean of the pressure; the
transport step then solves

    alpha (grad C, grad S) + (u . grad C, S) + 1/2 (div u . C, S) + r0 (C, S)
        = (g, S)

with Dirichlet rows replaced by identity rows (no column symmetrization).
``|u^i|`` and ``div u`` are evaluated at quadrature points from the full
P1-plus-bubble expansion.  Element loops run vectorized over fixed-size
chunks and accumulate COO triplets in a deterministic order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import fem_core as fc
from .errors import ConfigurationError, StructuralError

_CHUNK = 4096


@dataclass(frozen=True)
class PhysicalParams:
    """Coefficients of the flow/transport system.

    ``k_inv`` is either a constant symmetric positive-definite 2x2 array or a
    callable mapping ``(n, 2)`` coordinates to ``(n, 2, 2)`` tensors;
    ``k_eig_range`` declares its eigenvalue range, spot-checked during
    assembly.
    """

    mu: float = 1.0
    rho: float = 1.0
    beta: float = 0.0
    alpha: float = 1.0
    gamma: float = 0.0
    r0: float = 1.0
    k_inv: object = None
    k_eig_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        for name in ("mu", "rho", "alpha"):
            if not np.isfinite(getattr(self, name)) or getattr(self, name) <= 0.0:
                raise ConfigurationError(f"parameter {name} must be positive, got {getattr(self, name)!r}")
        for name in ("beta", "gamma", "r0"):
            if not np.isfinite(getattr(self, name)) or getattr(self, name) < 0.0:
                raise ConfigurationError(f"parameter {name} must be nonnegative, got {getattr(self, name)!r}")
        lo, hi = self.k_eig_range
        if not (0.0 < lo <= hi):
            raise ConfigurationError(f"declared K^-1 eigenvalue range {self.k_eig_range!r} is not positive")

    def k_inv_at(self, points: np.ndarray) -> np.ndarray:
        """K^-1 tensors at an ``(n, 2)`` coordinate array, shape ``(n, 2, 2)``."""
        n = points.shape[0]
        if self.k_inv is None:
            return np.broadcast_to(np.eye(2), (n, 2, 2))
        if callable(self.k_inv):
            tensors = np.asarray(self.k_inv(points), dtype=float)
            if tensors.shape != (n, 2, 2):
                raise ConfigurationError(f"K^-1 evaluator returned shape {tensors.shape}, expected ({n}, 2, 2)")
            return tensors
        return np.broadcast_to(np.asarray(self.k_inv, dtype=float), (n, 2, 2))

    def validate_k(self, points: np.ndarray) -> None:
        """Spot-check symmetry and the declared eigenvalue range of K^-1."""
        tensors = self.k_inv_at(points)
        lo, hi = self.k_eig_range
        sym_err = np.abs(tensors[:, 0, 1] - tensors[:, 1, 0]).max(initial=0.0)
        if sym_err > 1e-10 * max(1.0, hi):
            raise ConfigurationError(f"K^-1 is not symmetric (max asymmetry {sym_err:g})")
        half_tr = 0.5 * (tensors[:, 0, 0] + tensors[:, 1, 1])
        disc = np.sqrt(np.maximum(half_tr**2 - (tensors[:, 0, 0] * tensors[:, 1, 1]
                                                - tensors[:, 0, 1] * tensors[:, 1, 0]), 0.0))
        eig_min, eig_max = (half_tr - disc).min(), (half_tr + disc).max()
        tol = 1e-9 * max(1.0, hi)
        if eig_min < lo - tol or eig_max > hi + tol:
            raise ConfigurationError(
                f"K^-1 eigenvalues [{eig_min:g}, {eig_max:g}] leave the declared range [{lo:g}, {hi:g}]"
            )


@dataclass(frozen=True)
class ProblemData:
    """Problem data: f(x, C) = f0(x) + f1(C), transport source g, Dirichlet trace.

    All evaluators are vectorized and must be pure: ``f0`` and ``g`` take an
    ``(n, 2)`` coordinate array, ``f1`` takes an ``(n,)`` concentration array
    and returns ``(n, 2)``.  ``f1_lipschitz`` is diagnostic metadata only.
    """

    f0: Callable[[np.ndarray], np.ndarray]
    f1: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    concentration_boundary: Callable[[np.ndarray], np.ndarray]
    f1_lipschitz: float = float("nan")


@dataclass
class DiscreteState:
    """Coefficient vectors of one iterate on a fixed mesh generation."""

    u: np.ndarray
    p: np.ndarray
    c: np.ndarray
    mesh_generation: int

    @classmethod
    def zeros(cls, dofmap: fc.DofMap) -> "DiscreteState":
        c = np.where(dofmap.dirichlet_mask, dofmap.dirichlet_values, 0.0)
        return cls(
            u=np.zeros(dofmap.n_velocity),
            p=np.zeros(dofmap.n_pressure),
            c=c,
            mesh_generation=dofmap.mesh_generation,
        )

    def check_on(self, dofmap: fc.DofMap) -> None:
        dofmap.check_state(self.mesh_generation)
        if self.u.shape != (dofmap.n_velocity,) or self.p.shape != (dofmap.n_pressure,) \
                or self.c.shape != (dofmap.n_concentration,):
            raise StructuralError("state vector lengths do not match the DOF map")


@dataclass(frozen=True)
class LinearSystem:
    """An assembled sparse system with its block layout tag."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    layout: str  # "darcy" (velocity | pressure | multiplier) or "transport"


def _csr_from_triplets(rows, cols, vals, n: int) -> sp.csr_matrix:
    """Sum duplicate COO entries in a reproducible order and return CSR.

    scipy's own duplicate handling reorders the additions, which breaks the
    bitwise transpose relation between mirrored blocks; a stable sort keeps
    every (i, j) and (j, i) contribution sequence identical.
    """
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    keys = rows * np.int64(n) + cols
    first = np.ones(keys.size, dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    starts = np.flatnonzero(first)
    data = np.add.reduceat(vals, starts)
    indices = cols[starts]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows[starts] + 1, 1)
    np.cumsum(indptr, out=indptr)
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


@dataclass(frozen=True)
class ElementBatch:
    """Quadrature-ready geometry for one contiguous slice of elements."""

    elements: np.ndarray       # (t,) global element ids
    rule: fc.QuadratureRule
    wdet: np.ndarray           # (t, nq) weight * |det J|
    points: np.ndarray         # (t, nq, 2) physical quadrature points
    vel_values: np.ndarray     # (nq, 4) shared MINI scalar values
    scalar_values: np.ndarray  # (nq, 3) shared P1 values
    p1_grads: np.ndarray       # (t, 3, 2) physical P1 gradients
    bubble_grads: np.ndarray   # (t, nq, 2) physical bubble gradients

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


def element_batches(mesh, degree: int, chunk: int = _CHUNK):
    """Yield vectorized element batches covering the mesh in index order."""
    basis = fc.basis_eval(degree)
    _, jac_inv, det = fc.element_jacobians(mesh.vertices, mesh.triangles)
    coords = mesh.vertices[mesh.triangles]
    n_t = mesh.triangles.shape[0]
    for start in range(0, n_t, chunk):
        sl = slice(start, min(start + chunk, n_t))
        wdet = np.multiply.outer(det[sl], basis.rule.weights)
        points = np.einsum("qj,tjd->tqd", basis.scalar_values, coords[sl])
        p1_grads = fc.map_gradients(fc.P1_REF_GRADS, jac_inv[sl])
        bubble_grads = fc.map_gradients(basis.velocity_ref_grads[:, 3, :], jac_inv[sl])
        yield ElementBatch(
            elements=np.arange(sl.start, sl.stop),
            rule=basis.rule,
            wdet=wdet,
            points=points,
            vel_values=basis.velocity_values,
            scalar_values=basis.scalar_values,
            p1_grads=p1_grads,
            bubble_grads=bubble_grads,
        )


def velocity_at(batch: ElementBatch, coef: np.ndarray) -> np.ndarray:
    """Velocity values at batch quadrature points; ``coef`` is ``(t, 2, 4)``."""
    return np.einsum("tca,qa->tqc", coef, batch.vel_values)


def velocity_div_at(batch: ElementBatch, coef: np.ndarray) -> np.ndarray:
    """div u at batch quadrature points from the full P1+bubble expansion."""
    p1_part = np.einsum("tca,tac->t", coef[:, :, :3], batch.p1_grads)
    bubble_part = np.einsum("tc,tqc->tq", coef[:, :, 3], batch.bubble_grads)
    return p1_part[:, None] + bubble_part


def scalar_at(batch: ElementBatch, coef: np.ndarray) -> np.ndarray:
    """P1 field values at batch quadrature points; ``coef`` is ``(t, 3)``."""
    return np.einsum("tj,qj->tq", coef, batch.scalar_values)


def scalar_grad_at(batch: ElementBatch, coef: np.ndarray) -> np.ndarray:
    """(Constant) P1 gradients per element, shape ``(t, 2)``."""
    return np.einsum("tj,tjd->td", coef, batch.p1_grads)


def _check_dofmap(mesh, dofmap: fc.DofMap) -> None:
    if dofmap.mesh_generation != mesh.generation:
        raise StructuralError("DOF map was built for a different mesh generation")


def assemble_darcy_step(mesh, dofmap, params: PhysicalParams, data: ProblemData,
                        state_i: DiscreteState, quad_degree: int = 6) -> LinearSystem:
    """Assemble the monolithic saddle-point system of one flow step."""
    _check_dofmap(mesh, dofmap)
    state_i.check_on(dofmap)
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    params.validate_k(centroids)

    n = dofmap.n_darcy
    mu_rho = params.mu / params.rho
    beta_rho = params.beta / params.rho
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    u_coef_all = dofmap.velocity_element_coeffs(state_i.u)
    c_coef_all = dofmap.scalar_element_coeffs(state_i.c)

    for batch in element_batches(mesh, quad_degree):
        t, nq = batch.wdet.shape
        ids = batch.elements
        flat_pts = batch.points.reshape(-1, 2)
        u_q = velocity_at(batch, u_coef_all[ids])
        speed = np.sqrt(u_q[..., 0] ** 2 + u_q[..., 1] ** 2)
        tensor = mu_rho * params.k_inv_at(flat_pts).reshape(t, nq, 2, 2).copy()
        iso = params.gamma + beta_rho * speed
        tensor[..., 0, 0] += iso
        tensor[..., 1, 1] += iso

        a_loc = np.einsum("tq,tqcd,qa,qb->tcadb", batch.wdet, tensor,
                          batch.vel_values, batch.vel_values).reshape(t, 8, 8)
        int_n = np.einsum("tq,qa->ta", batch.wdet, batch.vel_values)
        g_loc = np.einsum("ta,tjc->tcaj", int_n, batch.p1_grads).reshape(t, 8, 3)
        m_loc = np.einsum("tq,qj->tj", batch.wdet, batch.scalar_values)

        c_q = scalar_at(batch, c_coef_all[ids])
        f_q = np.asarray(data.f0(flat_pts), dtype=float).reshape(t, nq, 2) \
            + np.asarray(data.f1(c_q.ravel()), dtype=float).reshape(t, nq, 2)
        if params.gamma != 0.0:
            f_q = f_q + params.gamma * u_q
        f_loc = np.einsum("tq,tqc,qa->tca", batch.wdet, f_q, batch.vel_values).reshape(t, 8)

        vd = dofmap.velocity_elem_dofs[ids]
        pd = dofmap.pressure_elem_dofs[ids]
        rows.append(np.broadcast_to(vd[:, :, None], (t, 8, 8)).ravel())
        cols.append(np.broadcast_to(vd[:, None, :], (t, 8, 8)).ravel())
        vals.append(a_loc.ravel())
        # gradient coupling, assembled once and mirrored exactly
        rows.append(np.broadcast_to(vd[:, :, None], (t, 8, 3)).ravel())
        cols.append(np.broadcast_to(pd[:, None, :], (t, 8, 3)).ravel())
        vals.append(g_loc.ravel())
        rows.append(np.broadcast_to(pd[:, None, :], (t, 8, 3)).ravel())
        cols.append(np.broadcast_to(vd[:, :, None], (t, 8, 3)).ravel())
        vals.append(g_loc.ravel())
        # mean-zero multiplier row/column
        mult = np.full(t * 3, dofmap.multiplier_index)
        rows.append(mult)
        cols.append(pd.ravel())
        vals.append(m_loc.ravel())
        rows.append(pd.ravel())
        cols.append(mult)
        vals.append(m_loc.ravel())
        np.add.at(rhs, vd.ravel(), f_loc.ravel())

    matrix = _csr_from_triplets(np.concatenate(rows), np.concatenate(cols),
                                np.concatenate(vals), n)
    return LinearSystem(matrix=matrix, rhs=rhs, layout="darcy")


def assemble_transport_step(mesh, dofmap, params: PhysicalParams, data: ProblemData,
                            u_new: np.ndarray, quad_degree: int = 6) -> LinearSystem:
    """Assemble the transport system for C given the freshly computed velocity."""
    _check_dofmap(mesh, dofmap)
    if u_new.shape != (dofmap.n_velocity,):
        raise StructuralError(
            f"velocity vector has shape {u_new.shape}, expected ({dofmap.n_velocity},)"
        )
    n = dofmap.n_concentration
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    u_coef_all = dofmap.velocity_element_coeffs(u_new)

    for batch in element_batches(mesh, quad_degree):
        t, nq = batch.wdet.shape
        ids = batch.elements
        u_q = velocity_at(batch, u_coef_all[ids])
        div_q = velocity_div_at(batch, u_coef_all[ids])
        sv = batch.scalar_values
        volume = batch.wdet.sum(axis=1)
        k_loc = params.alpha * np.einsum("t,tjd,tkd->tjk", volume, batch.p1_grads, batch.p1_grads)
        k_loc += np.einsum("tq,qj,tqd,tkd->tjk", batch.wdet, sv, u_q, batch.p1_grads)
        k_loc += 0.5 * np.einsum("tq,tq,qj,qk->tjk", batch.wdet, div_q, sv, sv)
        k_loc += params.r0 * np.einsum("tq,qj,qk->tjk", batch.wdet, sv, sv)
        g_q = np.asarray(data.g(batch.points.reshape(-1, 2)), dtype=float).reshape(t, nq)
        rhs_loc = np.einsum("tq,tq,qj->tj", batch.wdet, g_q, sv)

        sd = dofmap.scalar_elem_dofs[ids]
        rows.append(np.broadcast_to(sd[:, :, None], (t, 3, 3)).ravel())
        cols.append(np.broadcast_to(sd[:, None, :], (t, 3, 3)).ravel())
        vals.append(k_loc.ravel())
        np.add.at(rhs, sd.ravel(), rhs_loc.ravel())

    row_arr = np.concatenate(rows)
    col_arr = np.concatenate(cols)
    val_arr = np.concatenate(vals)
    # Dirichlet rows become identity rows; columns are left untouched.
    mask = dofmap.dirichlet_mask
    keep = ~mask[row_arr]
    fixed = np.nonzero(mask)[0]
    row_arr = np.concatenate([row_arr[keep], fixed])
    col_arr = np.concatenate([col_arr[keep], fixed])
    val_arr = np.concatenate([val_arr[keep], np.ones(fixed.size)])
    rhs[fixed] = dofmap.dirichlet_values[fixed]

    matrix = _csr_from_triplets(row_arr, col_arr, val_arr, n)
    return LinearSystem(matrix=matrix, rhs=rhs, layout="transport")


def element_mean(field: Callable[[np.ndarray], np.ndarray], mesh, degree: int = 6) -> np.ndarray:
    """Per-element mean values of a scalar or vector field evaluator."""
    parts = []
    for batch in element_batches(mesh, degree):
        t, nq = batch.wdet.shape
        values = np.asarray(field(batch.points.reshape(-1, 2)), dtype=float)
        values = values.reshape(t, nq, -1)
        integral = np.einsum("tq,tqk->tk", batch.wdet, values)
        parts.append(integral / batch.wdet.sum(axis=1)[:, None])
    means = np.concatenate(parts, axis=0)
    return means[:, 0] if means.shape[1] == 1 else means
