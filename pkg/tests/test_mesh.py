"""Mesh construction, topology, refinement, and export tests."""

import numpy as np
import pytest

from darcy_afem.errors import ConfigurationError, MeshError
from darcy_afem.mesh import (build_edge_topology, build_uniform_unit_square,
                             export_mesh, from_arrays, refine)


def check_conforming(mesh):
    """Exhaustive edge-incidence scan: every edge borders 1 or 2 triangles."""
    counts = {}
    for tri in mesh.triangles:
        for j in range(3):
            key = tuple(sorted((tri[j], tri[(j + 1) % 3])))
            counts[key] = counts.get(key, 0) + 1
    assert set(counts.values()) <= {1, 2}
    assert len(counts) == mesh.n_edges
    # Euler formula for a simply connected planar triangulation
    assert mesh.n_vertices - mesh.n_edges + mesh.n_triangles == 1


def min_angle(mesh):
    coords = mesh.vertices[mesh.triangles]
    angles = []
    for t in range(mesh.n_triangles):
        for j in range(3):
            a = coords[t, j]
            b = coords[t, (j + 1) % 3] - a
            c = coords[t, (j + 2) % 3] - a
            cosang = (b @ c) / (np.linalg.norm(b) * np.linalg.norm(c))
            angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
    return min(angles)


def test_unit_square_counts():
    m1 = build_uniform_unit_square(1)
    assert (m1.n_vertices, m1.n_triangles, m1.n_edges) == (4, 2, 5)
    assert (~m1.boundary_edge).sum() == 1
    m2 = build_uniform_unit_square(2)
    assert (m2.n_vertices, m2.n_triangles, m2.n_edges) == (9, 8, 16)
    assert m2.boundary_edge.sum() == 8
    m20 = build_uniform_unit_square(20)
    assert (m20.n_vertices, m20.n_triangles) == (441, 800)
    for m in (m1, m2, m20):
        check_conforming(m)
        assert np.all(m.areas > 0.0)
        assert abs(m.areas.sum() - 1.0) < 1e-12


def test_unit_square_rejects_bad_n():
    with pytest.raises(ConfigurationError):
        build_uniform_unit_square(0)
    with pytest.raises(ConfigurationError):
        build_uniform_unit_square(-3)


def test_refinement_edge_is_the_diagonal():
    mesh = build_uniform_unit_square(1)
    # the (t[0], t[1]) pair of both triangles is the shared hypotenuse
    for tri in mesh.triangles:
        length = np.linalg.norm(mesh.vertices[tri[0]] - mesh.vertices[tri[1]])
        assert abs(length - np.sqrt(2.0)) < 1e-15
    interior = np.nonzero(~mesh.boundary_edge)[0]
    assert interior.size == 1
    assert sorted(mesh.edges[interior[0]]) == sorted(mesh.triangles[0][:2])


def test_edge_topology_strip_and_counts():
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    triangles = np.array([[0, 1, 2], [0, 2, 3]])
    edges, tri_edges, edge_tris, edge_local = build_edge_topology(triangles, 4)
    assert edges.shape == (5, 2)
    shared = [e for e in range(5) if (edge_tris[e] >= 0).all()]
    assert len(shared) == 1
    assert sorted(edges[shared[0]]) == [0, 2]
    # tri_edges[t, j] joins local vertices j and j+1
    for t in range(2):
        for j in range(3):
            pair = sorted((triangles[t, j], triangles[t, (j + 1) % 3]))
            assert sorted(edges[tri_edges[t, j]]) == pair
    # edge_local is the inverse of tri_edges
    for e in range(5):
        for side in range(2):
            if edge_tris[e, side] >= 0:
                assert tri_edges[edge_tris[e, side], edge_local[e, side]] == e


def test_edge_topology_rejects_nonmanifold():
    triangles = np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]])
    with pytest.raises(MeshError):
        build_edge_topology(triangles, 5)


def test_edge_topology_rejects_out_of_range():
    with pytest.raises(MeshError):
        build_edge_topology(np.array([[0, 1, 7]]), 3)


def test_finalize_rejects_clockwise_triangle():
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(MeshError):
        from_arrays(vertices, np.array([[0, 2, 1]]))


def test_normals_unit_and_oriented():
    mesh = build_uniform_unit_square(3)
    lengths = np.linalg.norm(mesh.edge_normals, axis=1)
    assert np.allclose(lengths, 1.0, atol=1e-14)
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    first_centroid = mesh.vertices[mesh.triangles[mesh.edge_tris[:, 0]]].mean(axis=1)
    outward = np.einsum("ed,ed->e", mesh.edge_normals, mids - first_centroid)
    assert np.all(outward > 0.0)
    # boundary normals point out of the unit square
    for e in np.nonzero(mesh.boundary_edge)[0]:
        probe = mids[e] + 1e-6 * mesh.edge_normals[e]
        assert max(abs(probe[0] - 0.5), abs(probe[1] - 0.5)) > 0.5


def test_refine_all_of_n1_gives_four_triangles():
    mesh = build_uniform_unit_square(1)
    fine, record = refine(mesh, {0, 1})
    assert fine.n_triangles == 4
    check_conforming(fine)
    assert record.parent_triangle.shape == (4,)
    assert sorted(record.parent_triangle) == [0, 0, 1, 1]
    assert record.n_coarse_vertices == 4
    # the single new vertex is the diagonal midpoint
    assert fine.n_vertices == 5
    assert np.allclose(fine.vertices[4], [0.5, 0.5], atol=1e-15)


def test_refine_empty_marks_is_identity():
    mesh = build_uniform_unit_square(2)
    same, record = refine(mesh, set())
    assert np.array_equal(same.vertices, mesh.vertices)
    assert np.array_equal(same.triangles, mesh.triangles)
    assert record.new_vertex_endpoints.shape == (0, 2)
    assert np.array_equal(record.parent_triangle, np.arange(8))


def test_refine_single_mark_stays_conforming_and_shape_regular():
    mesh = build_uniform_unit_square(2)
    fine, _ = refine(mesh, {0})
    check_conforming(fine)
    assert np.all(fine.areas > 0.0)
    full, _ = refine(mesh, set(range(mesh.n_triangles)))
    assert min_angle(fine) >= min_angle(full) - 1e-12


def test_refine_marks_validation():
    mesh = build_uniform_unit_square(1)
    with pytest.raises(MeshError):
        refine(mesh, {5})
    with pytest.raises(MeshError):
        refine(mesh, {-1})


def test_refine_deterministic():
    mesh = build_uniform_unit_square(3)
    a, _ = refine(mesh, {2, 7, 11})
    b, _ = refine(mesh, {11, 2, 7})
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)


def test_refine_marked_triangles_are_bisected():
    mesh = build_uniform_unit_square(3)
    marked = {0, 5, 9}
    fine, record = refine(mesh, marked)
    for t in marked:
        assert np.sum(record.parent_triangle == t) >= 2
    check_conforming(fine)


def test_random_refinement_rounds_keep_invariants():
    rng = np.random.default_rng(42)
    mesh = build_uniform_unit_square(2)
    for _ in range(5):
        count = rng.integers(1, mesh.n_triangles + 1)
        marked = set(rng.choice(mesh.n_triangles, size=count, replace=False).tolist())
        mesh, record = refine(mesh, marked)
        check_conforming(mesh)
        assert np.all(mesh.areas > 0.0)
        assert abs(mesh.areas.sum() - 1.0) < 1e-12
        assert record.parent_triangle.shape == (mesh.n_triangles,)
        news = mesh.vertices[record.n_coarse_vertices:]
        mids = 0.5 * (mesh.vertices[record.new_vertex_endpoints[:, 0]]
                      + mesh.vertices[record.new_vertex_endpoints[:, 1]])
        assert np.allclose(news, mids, atol=1e-15)


def test_generation_increases():
    mesh = build_uniform_unit_square(1)
    fine, _ = refine(mesh, {0})
    assert fine.generation > mesh.generation


def test_export_mesh_round_trip(tmp_path):
    mesh = build_uniform_unit_square(2)
    path = tmp_path / "grid.mesh"
    export_mesh(mesh, path)
    lines = path.read_text().splitlines()
    assert lines[0] == f"{mesh.n_vertices} vertices {mesh.n_triangles} triangles {mesh.n_edges} edges"
    coords = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + mesh.n_vertices]])
    assert np.array_equal(coords, mesh.vertices)
    tris = np.array([[int(v) for v in ln.split()]
                     for ln in lines[1 + mesh.n_vertices:1 + mesh.n_vertices + mesh.n_triangles]])
    assert np.array_equal(tris, mesh.triangles)
    assert len(lines) == 1 + mesh.n_vertices + mesh.n_triangles + mesh.n_edges
