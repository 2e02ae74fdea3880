"""Conforming triangle meshes with newest-vertex bisection refinement.

Triangles are stored counterclockwise with the convention that the
refinement edge of element ``t`` is ``(t[0], t[1])`` (the "peak" opposite it
is ``t[2]``).  Bisection inserts the refinement-edge midpoint and hands it
to both children as their new peak, which keeps shape regularity; a closure
pass guarantees the refined mesh is conforming (no hanging nodes).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, MeshError

_generation = itertools.count()


@dataclass(frozen=True)
class Mesh:
    """Immutable conforming triangulation with full edge topology.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array
        Counterclockwise; ``(t[0], t[1])`` is the refinement edge.
    edges : (E, 2) int array
        Unique vertex pairs, each sorted ascending.
    tri_edges : (T, 3) int array
        ``tri_edges[t, j]`` is the edge joining ``t[j]`` and ``t[(j+1) % 3]``.
    edge_tris : (E, 2) int array
        Adjacent triangles, lower index first; second entry is -1 on the
        boundary.
    edge_local : (E, 2) int array
        Local edge index within each adjacent triangle (-1 padding).
    boundary_edge, boundary_vertex : bool arrays
    edge_normals : (E, 2) float array
        Unit normals; interior normals point from ``edge_tris[:, 0]`` into
        ``edge_tris[:, 1]``, boundary normals point outward.
    areas, h_elem, h_edge : float arrays
        Element areas, element diameters (longest edge), edge lengths.
    generation : int
        Monotone tag used to detect stale discrete states.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    tri_edges: np.ndarray
    edge_tris: np.ndarray
    edge_local: np.ndarray
    boundary_edge: np.ndarray
    boundary_vertex: np.ndarray
    edge_normals: np.ndarray
    areas: np.ndarray
    h_elem: np.ndarray
    h_edge: np.ndarray
    generation: int

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]


@dataclass(frozen=True)
class Refinement:
    """Parent/child bookkeeping returned by :func:`refine` for field transfer."""

    n_coarse_vertices: int
    new_vertex_endpoints: np.ndarray  # (V_new - V_coarse, 2) coarse vertex ids
    parent_triangle: np.ndarray       # (T_new,) coarse triangle ids


def build_edge_topology(triangles: np.ndarray, n_vertices: int):
    """Derive unique edges and adjacency from a triangle array.

    Returns ``(edges, tri_edges, edge_tris, edge_local)``; raises
    :class:`MeshError` if an edge is shared by more than two triangles or an
    index is out of range.
    """
    triangles = np.asarray(triangles)
    if triangles.size and (triangles.min() < 0 or triangles.max() >= n_vertices):
        raise MeshError("triangle vertex index out of range")
    n_t = triangles.shape[0]
    directed = triangles[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
    canonical = np.sort(directed, axis=1)
    edges, inverse = np.unique(canonical, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    tri_edges = inverse.reshape(n_t, 3)
    counts = np.bincount(inverse, minlength=edges.shape[0])
    if np.any(counts > 2):
        bad = int(np.nonzero(counts > 2)[0][0])
        raise MeshError(f"edge {tuple(edges[bad])} is shared by more than two triangles")
    order = np.argsort(inverse, kind="stable")
    tri_of_entry = order // 3
    local_of_entry = order % 3
    starts = np.zeros(edges.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    edge_tris = np.full((edges.shape[0], 2), -1, dtype=np.int64)
    edge_local = np.full((edges.shape[0], 2), -1, dtype=np.int64)
    edge_tris[:, 0] = tri_of_entry[starts[:-1]]
    edge_local[:, 0] = local_of_entry[starts[:-1]]
    interior = counts == 2
    edge_tris[interior, 1] = tri_of_entry[starts[:-1][interior] + 1]
    edge_local[interior, 1] = local_of_entry[starts[:-1][interior] + 1]
    return edges, tri_edges, edge_tris, edge_local


def _finalize(vertices: np.ndarray, triangles: np.ndarray) -> Mesh:
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    coords = vertices[triangles]
    signed = 0.5 * (
        (coords[:, 1, 0] - coords[:, 0, 0]) * (coords[:, 2, 1] - coords[:, 0, 1])
        - (coords[:, 1, 1] - coords[:, 0, 1]) * (coords[:, 2, 0] - coords[:, 0, 0])
    )
    if np.any(signed <= 0.0):
        bad = int(np.nonzero(signed <= 0.0)[0][0])
        raise MeshError(f"triangle {bad} is degenerate or clockwise (signed area {signed[bad]:g})")
    edges, tri_edges, edge_tris, edge_local = build_edge_topology(triangles, vertices.shape[0])
    boundary_edge = edge_tris[:, 1] < 0
    boundary_vertex = np.zeros(vertices.shape[0], dtype=bool)
    boundary_vertex[edges[boundary_edge].ravel()] = True
    vec = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    h_edge = np.hypot(vec[:, 0], vec[:, 1])
    normals = np.column_stack([vec[:, 1], -vec[:, 0]]) / h_edge[:, None]
    midpoints = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
    first_centroid = coords[edge_tris[:, 0]].mean(axis=1)
    flip = np.einsum("ed,ed->e", normals, first_centroid - midpoints) > 0.0
    normals[flip] *= -1.0
    side_lengths = h_edge[tri_edges]
    for arr in (vertices, triangles, edges, tri_edges, edge_tris, edge_local,
                boundary_edge, boundary_vertex, normals):
        arr.setflags(write=False)
    return Mesh(
        vertices=vertices,
        triangles=triangles,
        edges=edges,
        tri_edges=tri_edges,
        edge_tris=edge_tris,
        edge_local=edge_local,
        boundary_edge=boundary_edge,
        boundary_vertex=boundary_vertex,
        edge_normals=normals,
        areas=signed,
        h_elem=side_lengths.max(axis=1),
        h_edge=h_edge,
        generation=next(_generation),
    )


def _canonical_refinement_edges(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Rotate each triangle so its longest edge sits at ``(t[0], t[1])``.

    Ties are broken by the smallest (sorted) vertex-index pair so the choice
    is independent of input ordering.  Rotation preserves orientation.
    """
    triangles = np.asarray(triangles, dtype=np.int64)
    out = triangles.copy()
    for i, tri in enumerate(triangles):
        pairs = [(tri[j], tri[(j + 1) % 3]) for j in range(3)]
        lengths = [np.linalg.norm(vertices[b] - vertices[a]) for a, b in pairs]
        longest = max(lengths)
        best = min(
            (j for j in range(3) if lengths[j] >= longest * (1.0 - 1e-12)),
            key=lambda j: (min(pairs[j]), max(pairs[j])),
        )
        out[i] = np.roll(tri, -best)
    return out


def from_arrays(vertices: np.ndarray, triangles: np.ndarray) -> Mesh:
    """Build a mesh from raw arrays, assigning refinement edges canonically."""
    vertices = np.asarray(vertices, dtype=np.float64)
    return _finalize(vertices, _canonical_refinement_edges(vertices, triangles))


def build_uniform_unit_square(n: int) -> Mesh:
    """Structured mesh of the unit square: ``(n+1)^2`` vertices, ``2 n^2`` triangles.

    Each grid square is split along its bottom-left/top-right diagonal; the
    diagonal (unique longest edge) becomes the refinement edge of both halves.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigurationError(f"mesh subdivision count must be a positive integer, got {n!r}")
    side = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(side, side, indexing="xy")
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(ix, iy):
        return iy * (n + 1) + ix

    triangles = []
    for iy in range(n):
        for ix in range(n):
            a = vid(ix, iy)
            b = vid(ix + 1, iy)
            c = vid(ix + 1, iy + 1)
            d = vid(ix, iy + 1)
            triangles.append((c, a, b))
            triangles.append((a, c, d))
    return _finalize(vertices, np.array(triangles, dtype=np.int64))


def refine(mesh: Mesh, marked) -> tuple[Mesh, Refinement]:
    """Bisect the marked triangles (plus closure) into a conforming mesh.

    Children of element ``(v0, v1, v2)`` with refinement-edge midpoint ``m``
    are ``(v2, v0, m)`` and ``(v1, v2, m)``: the new vertex is the peak of
    both, so each child's refinement edge is one of the parent's other two
    edges.  After the closure pass every non-refinement marked edge of a
    parent is therefore the refinement edge of exactly one child, and a
    single second-level bisection restores conformity.

    Returns the refined mesh and a :class:`Refinement` record; the marked
    set may be any iterable of triangle indices (an empty set returns an
    equivalent mesh).
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64).reshape(-1))
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_triangles):
        raise MeshError("marked set contains an out-of-range triangle index")

    n_edges = mesh.n_edges
    split = np.zeros(n_edges, dtype=bool)
    split[mesh.tri_edges[marked, 0]] = True
    for _ in range(n_edges + 1):
        need = split[mesh.tri_edges].any(axis=1) & ~split[mesh.tri_edges[:, 0]]
        if not need.any():
            break
        split[mesh.tri_edges[need, 0]] = True
    else:  # pragma: no cover - the loop bound is a hard safety net
        raise MeshError("conformity closure did not terminate")

    split_ids = np.nonzero(split)[0]
    midpoint_of = np.full(n_edges, -1, dtype=np.int64)
    midpoint_of[split_ids] = mesh.n_vertices + np.arange(split_ids.size)
    new_coords = 0.5 * (
        mesh.vertices[mesh.edges[split_ids, 0]] + mesh.vertices[mesh.edges[split_ids, 1]]
    )
    vertices = np.vstack([mesh.vertices, new_coords])

    children: list[tuple[int, int, int]] = []
    parents: list[int] = []
    tri = mesh.triangles
    for t in range(mesh.n_triangles):
        v0, v1, v2 = tri[t]
        e0, e1, e2 = mesh.tri_edges[t]
        if not split[e0]:
            children.append((v0, v1, v2))
            parents.append(t)
            continue
        m0 = midpoint_of[e0]
        if split[e2]:
            m2 = midpoint_of[e2]
            children.append((m0, v2, m2))
            children.append((v0, m0, m2))
        else:
            children.append((v2, v0, m0))
        if split[e1]:
            m1 = midpoint_of[e1]
            children.append((m0, v1, m1))
            children.append((v2, m0, m1))
        else:
            children.append((v1, v2, m0))
        parents.extend([t] * (len(children) - len(parents)))

    refined = _finalize(vertices, np.array(children, dtype=np.int64))
    record = Refinement(
        n_coarse_vertices=mesh.n_vertices,
        new_vertex_endpoints=mesh.edges[split_ids].copy(),
        parent_triangle=np.array(parents, dtype=np.int64),
    )
    return refined, record


def export_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh dump: a count header, then coordinates, then
    0-based triangle and edge index rows."""
    with open(path, "w") as f:
        f.write(f"{mesh.n_vertices} vertices {mesh.n_triangles} triangles {mesh.n_edges} edges\n")
        for x, y in mesh.vertices:
            f.write(f"{x:.17g} {y:.17g}\n")
        for a, b, c in mesh.triangles:
            f.write(f"{a} {b} {c}\n")
        for a, b in mesh.edges:
            f.write(f"{a} {b}\n")
