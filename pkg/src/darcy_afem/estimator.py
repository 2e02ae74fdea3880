"""The five per-element error indicators, edge jumps, aggregation, stopping.

Per element ``k`` with next iterate ``(u, p, C)`` and previous iterate
``(u0, C0)``:

    eta_L1 = || u - u0 ||_L2(k)
    eta_L2 = || C0 - C ||_H1(k)                     (full norm)
    eta_D1 = h_k || alpha lap C - u.grad C - 1/2 div(u) C - r0 C + g_h ||_L2(k)
             + 1/2 sum_{interior edges} h_e^{1/2} || alpha [grad C . n] ||_L2(e)
    eta_D2 = || -grad p - gamma (u - u0) - (mu/rho) K^-1 u
               - (beta/rho) |u0| u + f_h(., C0) ||_L2(k)
    eta_D3 = h_k || div u ||_L3(k) + sum_{all edges} h_e^{1/3} || phi ||_L3(e)

where ``phi`` is ``1/2 [u.n]`` on interior edges and ``u.n`` (full weight) on
boundary edges, ``g_h``/``f_h`` are element means, and the Laplacian runs
through a generic second-derivative path (identically zero for P1).  Globals
aggregate as a plain sum over elements of the per-element Euclidean
combinations (an optional flag switches to the conventional
root-sum-of-squares).  Volume integrals use degree-10 quadrature, edge
integrals degree 7.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem_core as fc
from .assembly import (DiscreteState, PhysicalParams, ProblemData,
                       element_batches, scalar_at, scalar_grad_at,
                       velocity_at, velocity_div_at)
from .errors import ConfigurationError, StructuralError

VOLUME_DEGREE = 10
EDGE_DEGREE = 7

AGGREGATION_MODES = ("paper", "l2")


@dataclass(frozen=True)
class IndicatorTable:
    """Per-element indicators plus their global aggregates."""

    eta_L1: np.ndarray
    eta_L2: np.ndarray
    eta_D1: np.ndarray
    eta_D2: np.ndarray
    eta_D3: np.ndarray
    eta_L: float
    eta_D: float
    aggregation: str

    @property
    def eta_L_elem(self) -> np.ndarray:
        return np.sqrt(self.eta_L1**2 + self.eta_L2**2)

    @property
    def eta_D_elem(self) -> np.ndarray:
        return np.sqrt(self.eta_D1**2 + self.eta_D2**2 + self.eta_D3**2)


@dataclass(frozen=True)
class EdgeJumpField:
    """Edge-trace data at edge quadrature points.

    ``phi`` holds ``1/2 [u.n]`` on interior edges and ``u.n`` on boundary
    edges; ``conc_jump`` holds ``alpha [grad C . n]`` on interior edges and
    zero on the boundary.  Values follow each edge's stored normal, so
    flipping a normal negates the corresponding rows.
    """

    phi: np.ndarray        # (E, nq_edge)
    conc_jump: np.ndarray  # (E, nq_edge)
    degree: int


def _edge_side_traces(mesh, dofmap, state: DiscreteState, points: np.ndarray, side: int):
    """(u.n, alpha-free grad C . n) traces seen from ``edge_tris[:, side]``.

    Boundary rows of side 1 are returned as zeros; the caller masks them.
    Velocity is evaluated through the full P1+bubble expansion (the bubble's
    barycentric product vanishes on the edge by construction).
    """
    tris = np.where(mesh.edge_tris[:, side] >= 0, mesh.edge_tris[:, side], 0)
    tri_verts = mesh.triangles[tris]
    local_a = np.argmax(tri_verts == mesh.edges[:, 0, None], axis=1)
    local_b = np.argmax(tri_verts == mesh.edges[:, 1, None], axis=1)
    n_e, nq = mesh.n_edges, points.shape[0]
    bary = np.zeros((n_e, nq, 3))
    rows = np.arange(n_e)
    bary[rows[:, None], np.arange(nq)[None, :], local_a[:, None]] = 1.0 - points[None, :]
    bary[rows[:, None], np.arange(nq)[None, :], local_b[:, None]] = points[None, :]
    basis4 = np.concatenate([bary, (bary[..., 0] * bary[..., 1] * bary[..., 2])[..., None]], axis=-1)

    u_coef = dofmap.velocity_element_coeffs(state.u)[tris]
    u_trace = np.einsum("eca,eqa->eqc", u_coef, basis4)
    u_normal = np.einsum("eqc,ec->eq", u_trace, mesh.edge_normals)

    _, jac_inv, _ = fc.element_jacobians(mesh.vertices, mesh.triangles)
    p1_grads = fc.map_gradients(fc.P1_REF_GRADS, jac_inv[tris])
    c_grad = np.einsum("ej,ejd->ed", dofmap.scalar_element_coeffs(state.c)[tris], p1_grads)
    c_grad_normal = np.einsum("ed,ed->e", c_grad, mesh.edge_normals)
    return u_normal, np.broadcast_to(c_grad_normal[:, None], (n_e, nq)).copy()


def compute_phi(mesh, dofmap, state: DiscreteState, alpha: float = 1.0,
                degree: int = EDGE_DEGREE) -> EdgeJumpField:
    """Edge jump data for ``state``: the flux function phi and [grad C . n]."""
    state.check_on(dofmap)
    rule = fc.edge_rule(degree)
    un0, cn0 = _edge_side_traces(mesh, dofmap, state, rule.points, side=0)
    un1, cn1 = _edge_side_traces(mesh, dofmap, state, rule.points, side=1)
    interior = ~mesh.boundary_edge
    phi = np.where(interior[:, None], 0.5 * (un0 - un1), un0)
    conc_jump = np.where(interior[:, None], alpha * (cn0 - cn1), 0.0)
    return EdgeJumpField(phi=phi, conc_jump=conc_jump, degree=degree)


def _edge_weights(degree: int) -> np.ndarray:
    return fc.edge_rule(degree).weights


def _per_element_edge_sum(mesh, edge_values: np.ndarray, interior_only: bool) -> np.ndarray:
    """Sum per-edge scalars over each element's edge set."""
    contrib = edge_values[mesh.tri_edges]
    if interior_only:
        contrib = np.where(mesh.boundary_edge[mesh.tri_edges], 0.0, contrib)
    return contrib.sum(axis=1)


def eta_L1(mesh, dofmap, state_prev: DiscreteState, state_next: DiscreteState) -> np.ndarray:
    """Per-element L2 norm of the velocity iterate difference."""
    state_prev.check_on(dofmap)
    state_next.check_on(dofmap)
    du = dofmap.velocity_element_coeffs(state_next.u - state_prev.u)
    out = np.empty(mesh.n_triangles)
    for batch in element_batches(mesh, VOLUME_DEGREE):
        du_q = velocity_at(batch, du[batch.elements])
        out[batch.elements] = np.sqrt(
            np.einsum("tq,tqc,tqc->t", batch.wdet, du_q, du_q)
        )
    return out


def eta_L2(mesh, dofmap, state_prev: DiscreteState, state_next: DiscreteState) -> np.ndarray:
    """Per-element full H1 norm of the concentration iterate difference."""
    state_prev.check_on(dofmap)
    state_next.check_on(dofmap)
    dc = dofmap.scalar_element_coeffs(state_prev.c - state_next.c)
    out = np.empty(mesh.n_triangles)
    for batch in element_batches(mesh, VOLUME_DEGREE):
        dc_q = scalar_at(batch, dc[batch.elements])
        grad = scalar_grad_at(batch, dc[batch.elements])
        l2_sq = np.einsum("tq,tq->t", batch.wdet, dc_q**2)
        h1_semi_sq = np.einsum("td,td->t", grad, grad) * batch.wdet.sum(axis=1)
        out[batch.elements] = np.sqrt(l2_sq + h1_semi_sq)
    return out


def eta_D1(mesh, dofmap, params: PhysicalParams, state_next: DiscreteState,
           g_mean: np.ndarray, jumps: EdgeJumpField) -> np.ndarray:
    """Transport residual indicator: volume residual plus concentration-flux jumps."""
    state_next.check_on(dofmap)
    u_coef = dofmap.velocity_element_coeffs(state_next.u)
    c_coef = dofmap.scalar_element_coeffs(state_next.c)
    _, jac_inv, _ = fc.element_jacobians(mesh.vertices, mesh.triangles)
    metric = np.einsum("tkc,tlc->tkl", jac_inv, jac_inv)
    basis = fc.basis_eval(VOLUME_DEGREE)
    out = np.empty(mesh.n_triangles)
    for batch in element_batches(mesh, VOLUME_DEGREE):
        ids = batch.elements
        u_q = velocity_at(batch, u_coef[ids])
        div_q = velocity_div_at(batch, u_coef[ids])
        c_q = scalar_at(batch, c_coef[ids])
        c_grad = scalar_grad_at(batch, c_coef[ids])
        lap_basis = np.einsum("tkl,qjkl->tqj", metric[ids], basis.scalar_ref_hessians)
        lap_q = np.einsum("tj,tqj->tq", c_coef[ids], lap_basis)
        residual = (
            params.alpha * lap_q
            - np.einsum("tqc,tc->tq", u_q, c_grad)
            - 0.5 * div_q * c_q
            - params.r0 * c_q
            + g_mean[ids, None]
        )
        out[ids] = mesh.h_elem[ids] * np.sqrt(np.einsum("tq,tq->t", batch.wdet, residual**2))
    w = _edge_weights(jumps.degree)
    jump_norm = np.sqrt(mesh.h_edge * (jumps.conc_jump**2 @ w))
    out += 0.5 * _per_element_edge_sum(mesh, np.sqrt(mesh.h_edge) * jump_norm, interior_only=True)
    return out


def eta_D2(mesh, dofmap, params: PhysicalParams, state_prev: DiscreteState,
           state_next: DiscreteState, f_mean: np.ndarray) -> np.ndarray:
    """Momentum residual indicator against the element-mean data f_h."""
    state_prev.check_on(dofmap)
    state_next.check_on(dofmap)
    u0 = dofmap.velocity_element_coeffs(state_prev.u)
    u1 = dofmap.velocity_element_coeffs(state_next.u)
    p_coef = dofmap.scalar_element_coeffs(state_next.p)
    mu_rho = params.mu / params.rho
    beta_rho = params.beta / params.rho
    out = np.empty(mesh.n_triangles)
    for batch in element_batches(mesh, VOLUME_DEGREE):
        ids = batch.elements
        t, nq = batch.wdet.shape
        u0_q = velocity_at(batch, u0[ids])
        u1_q = velocity_at(batch, u1[ids])
        speed0 = np.sqrt(u0_q[..., 0] ** 2 + u0_q[..., 1] ** 2)
        grad_p = scalar_grad_at(batch, p_coef[ids])
        k_u1 = np.einsum("tqcd,tqd->tqc", params.k_inv_at(batch.points.reshape(-1, 2)).reshape(t, nq, 2, 2), u1_q)
        residual = (
            -grad_p[:, None, :]
            - params.gamma * (u1_q - u0_q)
            - mu_rho * k_u1
            - beta_rho * speed0[..., None] * u1_q
            + f_mean[ids, None, :]
        )
        out[ids] = np.sqrt(np.einsum("tq,tqc,tqc->t", batch.wdet, residual, residual))
    return out


def eta_D3(mesh, dofmap, state_next: DiscreteState, phi: EdgeJumpField) -> np.ndarray:
    """Divergence indicator: L3 volume norm plus L3 edge norms of phi."""
    state_next.check_on(dofmap)
    u_coef = dofmap.velocity_element_coeffs(state_next.u)
    out = np.empty(mesh.n_triangles)
    for batch in element_batches(mesh, VOLUME_DEGREE):
        ids = batch.elements
        div_q = velocity_div_at(batch, u_coef[ids])
        out[ids] = mesh.h_elem[ids] * np.cbrt(
            np.einsum("tq,tq->t", batch.wdet, np.abs(div_q) ** 3)
        )
    w = _edge_weights(phi.degree)
    phi_norm = np.cbrt(mesh.h_edge * (np.abs(phi.phi) ** 3 @ w))
    out += _per_element_edge_sum(mesh, np.cbrt(mesh.h_edge) * phi_norm, interior_only=False)
    return out


def composite_f_mean(mesh, dofmap, data: ProblemData, state_prev: DiscreteState,
                     degree: int = VOLUME_DEGREE) -> np.ndarray:
    """Element means of f(x, C^i) = f0(x) + f1(C^i(x)), shape (T, 2)."""
    c_coef = dofmap.scalar_element_coeffs(state_prev.c)
    out = np.empty((mesh.n_triangles, 2))
    for batch in element_batches(mesh, degree):
        ids = batch.elements
        t, nq = batch.wdet.shape
        c_q = scalar_at(batch, c_coef[ids])
        f_q = np.asarray(data.f0(batch.points.reshape(-1, 2)), dtype=float).reshape(t, nq, 2) \
            + np.asarray(data.f1(c_q.ravel()), dtype=float).reshape(t, nq, 2)
        out[ids] = np.einsum("tq,tqc->tc", batch.wdet, f_q) / batch.wdet.sum(axis=1)[:, None]
    return out


def compute_indicators(mesh, dofmap, params: PhysicalParams, data: ProblemData,
                       state_prev: DiscreteState, state_next: DiscreteState,
                       aggregation: str = "paper") -> IndicatorTable:
    """All five indicators for one Picard iterate pair, with global aggregates."""
    from .assembly import element_mean

    g_mean = element_mean(data.g, mesh, degree=VOLUME_DEGREE)
    f_mean = composite_f_mean(mesh, dofmap, data, state_prev)
    jumps = compute_phi(mesh, dofmap, state_next, alpha=params.alpha)
    l1 = eta_L1(mesh, dofmap, state_prev, state_next)
    l2 = eta_L2(mesh, dofmap, state_prev, state_next)
    d1 = eta_D1(mesh, dofmap, params, state_next, g_mean, jumps)
    d2 = eta_D2(mesh, dofmap, params, state_prev, state_next, f_mean)
    d3 = eta_D3(mesh, dofmap, state_next, jumps)
    eta_l, eta_d = _aggregate_arrays(np.sqrt(l1**2 + l2**2), np.sqrt(d1**2 + d2**2 + d3**2),
                                     aggregation)
    return IndicatorTable(eta_L1=l1, eta_L2=l2, eta_D1=d1, eta_D2=d2, eta_D3=d3,
                          eta_L=eta_l, eta_D=eta_d, aggregation=aggregation)


def _aggregate_arrays(l_elem: np.ndarray, d_elem: np.ndarray, mode: str) -> tuple[float, float]:
    if mode not in AGGREGATION_MODES:
        raise ConfigurationError(f"unknown aggregation mode {mode!r}; choose from {AGGREGATION_MODES}")
    if mode == "paper":
        return float(l_elem.sum()), float(d_elem.sum())
    return float(np.sqrt((l_elem**2).sum())), float(np.sqrt((d_elem**2).sum()))


def aggregate(table: IndicatorTable, mode: str = "paper") -> tuple[float, float]:
    """Global (eta_L, eta_D): per-element Euclidean combination, then either a
    plain element sum (``paper``) or a root-sum-of-squares (``l2``)."""
    return _aggregate_arrays(table.eta_L_elem, table.eta_D_elem, mode)


def stopping(eta_l: float, eta_d: float, gamma_bar: float = 0.01) -> bool:
    """True once the linearization error is dominated: eta_L <= gamma_bar * eta_D."""
    return eta_l <= gamma_bar * eta_d


def oscillation(mesh, dofmap, data: ProblemData, state: DiscreteState) -> tuple[np.ndarray, np.ndarray]:
    """Diagnostic data-oscillation pair (h_k ||g - g_h||_L2, ||f(.,C) - f_h(.,C)||_L2)."""
    state.check_on(dofmap)
    c_coef = dofmap.scalar_element_coeffs(state.c)
    osc_g = np.empty(mesh.n_triangles)
    osc_f = np.empty(mesh.n_triangles)
    for batch in element_batches(mesh, VOLUME_DEGREE):
        ids = batch.elements
        t, nq = batch.wdet.shape
        volume = batch.wdet.sum(axis=1)
        g_q = np.asarray(data.g(batch.points.reshape(-1, 2)), dtype=float).reshape(t, nq)
        g_mean = np.einsum("tq,tq->t", batch.wdet, g_q) / volume
        osc_g[ids] = mesh.h_elem[ids] * np.sqrt(
            np.einsum("tq,tq->t", batch.wdet, (g_q - g_mean[:, None]) ** 2)
        )
        c_q = scalar_at(batch, c_coef[ids])
        f_q = np.asarray(data.f0(batch.points.reshape(-1, 2)), dtype=float).reshape(t, nq, 2) \
            + np.asarray(data.f1(c_q.ravel()), dtype=float).reshape(t, nq, 2)
        f_mean = np.einsum("tq,tqc->tc", batch.wdet, f_q) / volume[:, None]
        diff = f_q - f_mean[:, None, :]
        osc_f[ids] = np.sqrt(np.einsum("tq,tqc,tqc->t", batch.wdet, diff, diff))
    return osc_g, osc_f


def write_indicator_csv(path, mesh, table: IndicatorTable) -> None:
    """CSV export: element id, centroid, the five indicators, marker value."""
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    marker = table.eta_D_elem
    with open(path, "w") as f:
        f.write("element,centroid_x,centroid_y,eta_L1,eta_L2,eta_D1,eta_D2,eta_D3,eta_D_elem\n")
        for t in range(mesh.n_triangles):
            row = (centroids[t, 0], centroids[t, 1], table.eta_L1[t], table.eta_L2[t],
                   table.eta_D1[t], table.eta_D2[t], table.eta_D3[t], marker[t])
            f.write(str(t) + "," + ",".join(f"{v:.17g}" for v in row) + "\n")
