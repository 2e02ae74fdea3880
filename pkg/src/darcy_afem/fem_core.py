"""Reference-element machinery: quadrature rules, basis evaluation, DOF maps.

Velocity uses the MINI element (P1 plus one cubic bubble per component),
pressure and concentration are continuous P1.  Everything in this module
lives on the reference triangle ``{(xi, eta): xi, eta >= 0, xi + eta <= 1}``
with barycentric coordinates ``(1 - xi - eta, xi, eta)``; per-element
geometry enters only through affine maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_legendre

from .errors import ConfigurationError, StructuralError

#: Triangle quadrature degrees the artifact supports.
TRIANGLE_DEGREES = (2, 4, 6, 10)

_MAX_EDGE_DEGREE = 31

#: Reference gradients of the barycentric coordinates with respect to (xi, eta).
P1_REF_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass(frozen=True)
class QuadratureRule:
    """Positive-weight quadrature rule on a reference domain.

    Triangle rules store barycentric coordinates in ``points`` with shape
    ``(n, 3)``; their weights sum to the reference area 1/2.  Edge rules
    store coordinates in [0, 1] with shape ``(n,)``; their weights sum to 1.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]


def _duffy_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Legendre product rule on the reference triangle.

    With ``n`` points per direction the Duffy substitution
    ``(xi, eta) = (s, t * (1 - s))`` integrates total degree ``2n - 2``
    exactly (the Jacobian ``1 - s`` raises the s-degree by one).
    """
    n = (degree + 3) // 2
    t, w = roots_legendre(n)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w
    s_pts, t_pts = np.meshgrid(t, t, indexing="ij")
    w_pts = np.outer(w, w) * (1.0 - s_pts)
    xi = s_pts.ravel()
    eta = (t_pts * (1.0 - s_pts)).ravel()
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    return bary, w_pts.ravel()


def _symmetrize(bary: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average a rule over all six barycentric permutations.

    Each permutation is an area-preserving affine bijection of the reference
    triangle, so exactness is preserved while the result becomes invariant
    under relabeling of the vertices.
    """
    perms = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    pts = np.vstack([bary[:, p] for p in perms])
    wts = np.concatenate([weights / 6.0] * 6)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return pts[order], wts[order]


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Symmetric triangle rule exact for polynomials up to ``degree``.

    Raises
    ------
    ConfigurationError
        If ``degree`` is not one of ``TRIANGLE_DEGREES``.
    """
    if degree not in TRIANGLE_DEGREES:
        raise ConfigurationError(
            f"unsupported triangle quadrature degree {degree}; choose one of {TRIANGLE_DEGREES}"
        )
    if degree == 2:
        bary = np.array([[0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
        weights = np.full(3, 1.0 / 6.0)
    else:
        bary, weights = _symmetrize(*_duffy_rule(degree))
    bary.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(points=bary, weights=weights, degree=degree)


@lru_cache(maxsize=None)
def edge_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for polynomials up to ``degree``."""
    if not isinstance(degree, (int, np.integer)) or degree < 1 or degree > _MAX_EDGE_DEGREE:
        raise ConfigurationError(
            f"unsupported edge quadrature degree {degree}; expected an integer in [1, {_MAX_EDGE_DEGREE}]"
        )
    n = degree // 2 + 1
    t, w = roots_legendre(n)
    points = 0.5 * (t + 1.0)
    weights = 0.5 * w
    points.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(points=points, weights=weights, degree=degree)


def bubble_values(bary: np.ndarray) -> np.ndarray:
    """The cubic bubble lambda_1 * lambda_2 * lambda_3 at barycentric points."""
    return bary[:, 0] * bary[:, 1] * bary[:, 2]


def bubble_ref_grads(bary: np.ndarray) -> np.ndarray:
    """Reference-coordinate gradients of the bubble at barycentric points."""
    l1, l2, l3 = bary[:, 0], bary[:, 1], bary[:, 2]
    return (
        np.outer(l2 * l3, P1_REF_GRADS[0])
        + np.outer(l1 * l3, P1_REF_GRADS[1])
        + np.outer(l1 * l2, P1_REF_GRADS[2])
    )


@dataclass(frozen=True)
class BasisEval:
    """Reference-element basis data tabulated at the points of one rule.

    ``velocity_*`` covers the four scalar MINI functions (three vertex hats
    followed by the bubble); ``scalar_*`` covers the P1 basis used for
    pressure and concentration.  Gradients are with respect to reference
    coordinates and are pushed to physical space per element via the affine
    inverse transpose (see :func:`map_gradients`).  The second-derivative
    table exists so Laplacians are computed through a generic path even
    though it is identically zero for P1.
    """

    rule: QuadratureRule
    velocity_values: np.ndarray      # (nq, 4)
    velocity_ref_grads: np.ndarray   # (nq, 4, 2)
    scalar_values: np.ndarray        # (nq, 3)
    scalar_ref_grads: np.ndarray     # (nq, 3, 2)
    scalar_ref_hessians: np.ndarray  # (nq, 3, 2, 2)


@lru_cache(maxsize=None)
def basis_eval(degree: int) -> BasisEval:
    """Tabulate MINI and P1 basis data at the triangle rule of ``degree``."""
    rule = triangle_rule(degree)
    bary = rule.points
    nq = rule.n_points
    vel_vals = np.column_stack([bary, bubble_values(bary)])
    vel_grads = np.empty((nq, 4, 2))
    vel_grads[:, :3, :] = np.broadcast_to(P1_REF_GRADS, (nq, 3, 2))
    vel_grads[:, 3, :] = bubble_ref_grads(bary)
    scalar_grads = np.broadcast_to(P1_REF_GRADS, (nq, 3, 2)).copy()
    scalar_hess = np.zeros((nq, 3, 2, 2))
    for arr in (vel_vals, vel_grads, scalar_grads, scalar_hess):
        arr.setflags(write=False)
    return BasisEval(
        rule=rule,
        velocity_values=vel_vals,
        velocity_ref_grads=vel_grads,
        scalar_values=bary,
        scalar_ref_grads=scalar_grads,
        scalar_ref_hessians=scalar_hess,
    )


def element_jacobians(vertices: np.ndarray, triangles: np.ndarray):
    """Affine map data for every element.

    Returns ``(jac, jac_inv, det)`` where ``jac[e] = [x1-x0 | x2-x0]`` maps
    reference to physical coordinates and ``det`` is its (positive)
    determinant, i.e. twice the element area.
    """
    coords = vertices[triangles]  # (T, 3, 2)
    jac = np.stack([coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]], axis=-1)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    jac_inv = np.empty_like(jac)
    jac_inv[:, 0, 0] = jac[:, 1, 1]
    jac_inv[:, 0, 1] = -jac[:, 0, 1]
    jac_inv[:, 1, 0] = -jac[:, 1, 0]
    jac_inv[:, 1, 1] = jac[:, 0, 0]
    jac_inv /= det[:, None, None]
    return jac, jac_inv, det


def map_gradients(ref_grads: np.ndarray, jac_inv: np.ndarray) -> np.ndarray:
    """Push reference gradients to physical space: ``grad_x = J^{-T} grad_ref``.

    ``ref_grads`` has shape ``(..., 2)`` indexed by reference direction,
    ``jac_inv`` has shape ``(T, 2, 2)``; the result gains a leading element
    axis.
    """
    return np.einsum("...k,ekd->e...d", ref_grads, jac_inv)


def map_hessians(ref_hess: np.ndarray, jac_inv: np.ndarray) -> np.ndarray:
    """Push reference second derivatives to physical space (affine maps only)."""
    return np.einsum("ekc,...kl,eld->e...cd", jac_inv, ref_hess, jac_inv)


@dataclass(frozen=True)
class DofMap:
    """Global degree-of-freedom layout for one mesh.

    The monolithic Darcy-step block order is velocity | pressure | one
    mean-zero multiplier row, with velocity component-major: component ``c``
    occupies ``[c * stride, (c + 1) * stride)`` where ``stride = V + T``
    (vertex hats first, then one bubble per element).  Pressure and
    concentration are vertex-indexed P1; the concentration system is solved
    separately with ``dirichlet_mask`` marking boundary vertices.
    """

    n_vertices: int
    n_triangles: int
    n_velocity: int
    n_pressure: int
    n_concentration: int
    velocity_stride: int
    pressure_offset: int
    multiplier_index: int
    n_darcy: int
    dirichlet_mask: np.ndarray        # (V,) bool
    dirichlet_values: np.ndarray      # (V,) float, zero off the boundary
    velocity_elem_dofs: np.ndarray    # (T, 8) component-major local dofs
    pressure_elem_dofs: np.ndarray    # (T, 3)
    scalar_elem_dofs: np.ndarray      # (T, 3)
    mesh_generation: int

    def velocity_element_coeffs(self, u: np.ndarray) -> np.ndarray:
        """Per-element velocity coefficients with shape ``(T, 2, 4)``."""
        if u.shape != (self.n_velocity,):
            raise StructuralError(
                f"velocity vector has shape {u.shape}, expected ({self.n_velocity},)"
            )
        return u[self.velocity_elem_dofs].reshape(self.n_triangles, 2, 4)

    def scalar_element_coeffs(self, values: np.ndarray) -> np.ndarray:
        """Per-element P1 coefficients with shape ``(T, 3)``."""
        return values[self.scalar_elem_dofs]

    def check_state(self, mesh_generation: int) -> None:
        if mesh_generation != self.mesh_generation:
            raise StructuralError(
                "discrete state was built for a different mesh generation "
                f"({mesh_generation} != {self.mesh_generation})"
            )


def build_dofmap(mesh, dirichlet_values=None) -> DofMap:
    """Construct the DOF layout for ``mesh``.

    ``dirichlet_values`` is an optional scalar field (vectorized over an
    ``(n, 2)`` coordinate array) sampled at boundary vertices to fix the
    concentration there; omitted it defaults to zero.
    """
    n_v = mesh.vertices.shape[0]
    n_t = mesh.triangles.shape[0]
    stride = n_v + n_t
    n_velocity = 2 * stride
    tris = mesh.triangles
    bubbles = n_v + np.arange(n_t)
    comp0 = np.column_stack([tris, bubbles])
    vel_elem = np.hstack([comp0, comp0 + stride])
    bc = np.zeros(n_v)
    if dirichlet_values is not None:
        on_boundary = mesh.boundary_vertex
        bc[on_boundary] = np.asarray(dirichlet_values(mesh.vertices[on_boundary]), dtype=float)
    return DofMap(
        n_vertices=n_v,
        n_triangles=n_t,
        n_velocity=n_velocity,
        n_pressure=n_v,
        n_concentration=n_v,
        velocity_stride=stride,
        pressure_offset=n_velocity,
        multiplier_index=n_velocity + n_v,
        n_darcy=n_velocity + n_v + 1,
        dirichlet_mask=mesh.boundary_vertex.copy(),
        dirichlet_values=bc,
        velocity_elem_dofs=vel_elem,
        pressure_elem_dofs=tris + n_velocity,
        scalar_elem_dofs=tris.copy(),
        mesh_generation=mesh.generation,
    )
