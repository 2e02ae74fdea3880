"""Assembly tests against the dense oracle and structural invariants."""

import dataclasses

import numpy as np
import pytest

import oracles
from darcy_afem import fem_core as fc
from darcy_afem.assembly import (DiscreteState, PhysicalParams, ProblemData,
                                 assemble_darcy_step, assemble_transport_step,
                                 element_mean)
from darcy_afem.errors import ConfigurationError, StructuralError
from darcy_afem.linsolve import dense_solve
from darcy_afem.mesh import build_uniform_unit_square, from_arrays


def poly_data():
    return ProblemData(
        f0=lambda xy: np.column_stack([1.0 + xy[:, 0], 2.0 * xy[:, 1]]),
        f1=lambda c: np.column_stack([c, 2.0 * c]),
        g=lambda xy: 1.0 + xy[:, 0],
        concentration_boundary=lambda xy: np.zeros(xy.shape[0]),
    )


def zero_data():
    zero_vec = lambda xy: np.zeros((xy.shape[0], 2))
    return ProblemData(
        f0=zero_vec,
        f1=lambda c: np.zeros((c.shape[0], 2)),
        g=lambda xy: np.zeros(xy.shape[0]),
        concentration_boundary=lambda xy: np.zeros(xy.shape[0]),
    )


def polynomial_state(mesh, dofmap, rng=None):
    """A state whose speed |u| is polynomial: u = (positive P1+bubble, 0)."""
    state = DiscreteState.zeros(dofmap)
    v = mesh.vertices
    stride = dofmap.velocity_stride
    state.u[: mesh.n_vertices] = 2.0 + v[:, 0] + v[:, 1]
    state.u[mesh.n_vertices: stride] = 0.5
    if rng is not None:
        state.c = np.where(dofmap.dirichlet_mask, state.c, rng.normal(size=mesh.n_vertices))
        state.p = rng.normal(size=mesh.n_vertices)
    return state


def test_params_validation():
    with pytest.raises(ConfigurationError):
        PhysicalParams(mu=0.0)
    with pytest.raises(ConfigurationError):
        PhysicalParams(beta=-1.0)
    with pytest.raises(ConfigurationError):
        PhysicalParams(k_eig_range=(0.0, 1.0))
    with pytest.raises(ConfigurationError):
        PhysicalParams(k_inv=np.array([[1.0, 0.5], [0.0, 1.0]])).validate_k(np.zeros((1, 2)))
    with pytest.raises(ConfigurationError):
        PhysicalParams(k_inv=3.0 * np.eye(2)).validate_k(np.zeros((1, 2)))
    PhysicalParams(k_inv=3.0 * np.eye(2), k_eig_range=(3.0, 3.0)).validate_k(np.zeros((1, 2)))


def test_darcy_matches_dense_oracle_simple_data():
    # K = I, gamma = 1, mu = rho = 1, beta = 0, f0 = (1, 0): every integrand
    # is polynomial, so the oracle's own high-degree rule applies
    mesh = build_uniform_unit_square(1)
    dofmap = fc.build_dofmap(mesh)
    params = PhysicalParams(gamma=1.0)
    data = dataclasses.replace(
        zero_data(), f0=lambda xy: np.column_stack([np.ones(xy.shape[0]), np.zeros(xy.shape[0])])
    )
    state = DiscreteState.zeros(dofmap)
    system = assemble_darcy_step(mesh, dofmap, params, data, state)
    dense_m, dense_r = oracles.dense_darcy_system(mesh, dofmap, params, data, state)
    scale = np.abs(dense_m).max()
    assert np.abs(system.matrix.toarray() - dense_m).max() <= 1e-12 * scale
    assert np.abs(system.rhs - dense_r).max() <= 1e-12 * max(1.0, np.abs(dense_r).max())


def test_darcy_matches_dense_oracle_nonlinear_state():
    # polynomial-speed state keeps the |u^i| factor exactly integrable by
    # both the package degree-10 rule and the oracle's independent rule
    mesh = build_uniform_unit_square(2)
    dofmap = fc.build_dofmap(mesh)
    params = PhysicalParams(gamma=10.0, beta=10.0)
    data = poly_data()
    state = polynomial_state(mesh, dofmap, np.random.default_rng(3))
    system = assemble_darcy_step(mesh, dofmap, params, data, state, quad_degree=10)
    dense_m, dense_r = oracles.dense_darcy_system(mesh, dofmap, params, data, state)
    scale = np.abs(dense_m).max()
    assert np.abs(system.matrix.toarray() - dense_m).max() <= 1e-12 * scale
    assert np.abs(system.rhs - dense_r).max() <= 1e-12 * np.abs(dense_r).max()


def test_darcy_zero_data_solves_to_zero():
    mesh = build_uniform_unit_square(2)
    dofmap = fc.build_dofmap(mesh)
    params = PhysicalParams(gamma=1.0)
    system = assemble_darcy_step(mesh, dofmap, params, zero_data(),
                                 DiscreteState.zeros(dofmap))
    x = dense_solve(system.matrix.toarray(), system.rhs)
    assert np.abs(x).max() < 1e-12


def test_darcy_velocity_block_symmetric_positive_definite():
    mesh = build_uniform_unit_square(2)
    dofmap = fc.build_dofmap(mesh)
    params = PhysicalParams(gamma=10.0, beta=10.0)
    state = polynomial_state(mesh, dofmap)
    system = assemble_darcy_step(mesh, dofmap, params, poly_data(), state)
    nv = dofmap.n_velocity
    block = system.matrix.toarray()[:nv, :nv]
    assert np.abs(block - block.T).max() <= 1e-13 * np.abs(block).max()
    assert np.linalg.eigvalsh(0.5 * (block + block.T)).min() > 0.0


def test_darcy_gradient_coupling_is_exact_transpose():
    mesh = build_uniform_unit_square(3)
    dofmap = fc.build_dofmap(mesh)
    system = assemble_darcy_step(mesh, dofmap, PhysicalParams(gamma=1.0),
                                 zero_data(), DiscreteState.zeros(dofmap))
    nv, po = dofmap.n_velocity, dofmap.pressure_offset
    np_ = dofmap.n_pressure
    upper = system.matrix[:nv, po:po + np_].toarray()
    lower = system.matrix[po:po + np_, :nv].toarray()
    assert np.abs(upper - lower.T).max() == 0.0


def test_darcy_multiplier_row_integrates_pressure_hats():
    mesh = build_uniform_unit_square(2)
    dofmap = fc.build_dofmap(mesh)
    system = assemble_darcy_step(mesh, dofmap, PhysicalParams(gamma=1.0),
                                 zero_data(), DiscreteState.zeros(dofmap))
    row = system.matrix[dofmap.multiplier_index].toarray().ravel()
    # integral of each P1 hat = support area / 3
    support = np.zeros(mesh.n_vertices)
    np.add.at(support, mesh.triangles.ravel(), np.repeat(mesh.areas / 3.0, 3))
    assert np.allclose(row[dofmap.pressure_offset:dofmap.multiplier_index], support, atol=1e-14)
    assert abs(row[dofmap.pressure_offset:dofmap.multiplier_index].sum() - 1.0) < 1e-13
    assert np.all(row[:dofmap.n_velocity] == 0.0)


def test_darcy_no_zero_rows():
    mesh = build_uniform_unit_square(2)
    dofmap = fc.build_dofmap(mesh)
    system = assemble_darcy_step(mesh, dofmap, PhysicalParams(gamma=1.0),
                                 zero_data(), DiscreteState.zeros(dofmap))
    assert np.all(np.diff(system.matrix.indptr) > 0)


def test_darcy_generation_guard():
    mesh = build_uniform_unit_square(2)
    stale = fc.build_dofmap(build_uniform_unit_square(2))
    with pytest.raises(StructuralError):
        assemble_darcy_step(mesh, stale, PhysicalParams(gamma=1.0), zero_data(),
                            DiscreteState.zeros(stale))


def test_assembly_independent_of_element_order():
    mesh = build_uniform_unit_square(2)
    dofmap = fc.build_dofmap(mesh)
    params = PhysicalParams(gamma=10.0, beta=10.0)
    data = poly_data()
    state = polynomial_state(mesh, dofmap, np.random.default_rng(11))
    system = assemble_darcy_step(mesh, dofmap, params, data, state)

    rng = np.random.default_rng(5)
    perm = rng.permutation(mesh.n_triangles)
    mesh2 = from_arrays(np.asarray(mesh.vertices), np.asarray(mesh.triangles)[perm])
    assert np.array_equal(mesh2.triangles, mesh.triangles[perm])
    dofmap2 = fc.build_dofmap(mesh2)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    state2 = DiscreteState.zeros(dofmap2)
    nv, nt, stride = mesh.n_vertices, mesh.n_triangles, dofmap.velocity_stride
    for comp in range(2):
        state2.u[comp * stride: comp * stride + nv] = state.u[comp * stride: comp * stride + nv]
        state2.u[comp * stride + nv: (comp + 1) * stride] = \
            state.u[comp * stride + nv: (comp + 1) * stride][perm]
    state2.p = state.p.copy()
    state2.c = state.c.copy()
    system2 = assemble_darcy_step(mesh2, dofmap2, params, data, state2)

    pi = np.arange(dofmap.n_darcy)
    for comp in range(2):
        pi[comp * stride + nv: (comp + 1) * stride] = comp * stride + nv + inv
    a1 = system.matrix.toarray()
    a2 = system2.matrix.toarray()
    scale = np.abs(a1).max()
    assert np.abs(a2[np.ix_(pi, pi)] - a1).max() <= 1e-12 * scale
    assert np.abs(system2.rhs[pi] - system.rhs).max() <= 1e-12 * max(1.0, np.abs(system.rhs).max())


def test_transport_single_element_stiffness_plus_mass():
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    mesh = from_arrays(vertices, np.array([[0, 1, 2]]))
    dofmap = fc.build_dofmap(mesh)
    # drop the Dirichlet mask to expose the raw operator
    open_map = dataclasses.replace(dofmap, dirichlet_mask=np.zeros(3, dtype=bool))
    system = assemble_transport_step(mesh, open_map, PhysicalParams(),
                                     zero_data(), np.zeros(open_map.n_velocity))
    area = 0.5
    mass = (area / 12.0) * (np.ones((3, 3)) + np.eye(3))
    stiffness = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    assert np.abs(system.matrix.toarray() - (stiffness + mass)).max() < 1e-14


def test_transport_constant_reaction_balance():
    # u = 0, g = r0 * c0: the interior residual of C = c0 vanishes; with
    # c0 = 0 the assembled solution is identically zero
    mesh = build_uniform_unit_square(3)
    dofmap = fc.build_dofmap(mesh)
    params = PhysicalParams(r0=2.0)
    c0 = 0.75
    data = dataclasses.replace(zero_data(), g=lambda xy: np.full(xy.shape[0], params.r0 * c0))
    system = assemble_transport_step(mesh, dofmap, params, data, np.zeros(dofmap.n_velocity))
    resid = system.matrix @ np.full(dofmap.n_concentration, c0) - system.rhs
    interior = ~dofmap.dirichlet_mask
    assert np.abs(resid[interior]).max() < 1e-13
    zero_sys = assemble_transport_step(mesh, dofmap, params, zero_data(),
                                       np.zeros(dofmap.n_velocity))
    x = dense_solve(zero_sys.matrix.toarray(), zero_sys.rhs)
    assert np.abs(x).max() < 1e-13


def test_transport_matches_dense_oracle():
    mesh = build_uniform_unit_square(2)
    dofmap = fc.build_dofmap(mesh, lambda xy: xy[:, 0] * xy[:, 1])
    params = PhysicalParams(alpha=0.7, r0=1.3)
    data = poly_data()
    rng = np.random.default_rng(17)
    u_new = rng.normal(size=dofmap.n_velocity)
    system = assemble_transport_step(mesh, dofmap, params, data, u_new, quad_degree=10)
    dense_m, dense_r = oracles.dense_transport_system(mesh, dofmap, params, data, u_new)
    scale = np.abs(dense_m).max()
    assert np.abs(system.matrix.toarray() - dense_m).max() <= 1e-12 * scale
    assert np.abs(system.rhs - dense_r).max() <= 1e-12 * max(1.0, np.abs(dense_r).max())


def test_transport_convection_skew_on_divergence_free_fields():
    mesh = build_uniform_unit_square(3)
    dofmap = fc.build_dofmap(mesh)
    params = PhysicalParams(alpha=1.0, r0=1.0)
    # constant velocity: divergence-free with zero bubbles
    u = np.zeros(dofmap.n_velocity)
    u[: mesh.n_vertices] = 1.0
    u[dofmap.velocity_stride: dofmap.velocity_stride + mesh.n_vertices] = 2.0
    with_u = assemble_transport_step(mesh, dofmap, params, zero_data(), u)
    without = assemble_transport_step(mesh, dofmap, params, zero_data(),
                                      np.zeros(dofmap.n_velocity))
    rng = np.random.default_rng(23)
    for _ in range(5):
        s = rng.normal(size=dofmap.n_concentration)
        s[dofmap.dirichlet_mask] = 0.0
        conv = s @ ((with_u.matrix - without.matrix) @ s)
        assert abs(conv) < 1e-10
        stiff = params.alpha * sum(
            mesh.areas[t] * np.dot(
                grads := np.linalg.inv(
                    np.vstack([np.ones(3), mesh.vertices[mesh.triangles[t]].T])
                )[:, 1:].T @ s[mesh.triangles[t]], grads)
            for t in range(mesh.n_triangles))
        assert s @ (with_u.matrix @ s) >= stiff - 1e-10


def test_element_mean_values():
    mesh = build_uniform_unit_square(2)
    const = element_mean(lambda xy: np.full(xy.shape[0], 3.25), mesh)
    assert np.allclose(const, 3.25, atol=1e-14)
    ref = from_arrays(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                      np.array([[0, 1, 2]]))
    mean_x = element_mean(lambda xy: xy[:, 0], ref)
    assert abs(mean_x[0] - 1.0 / 3.0) < 1e-14
    vec = element_mean(lambda xy: np.column_stack([xy[:, 0], 2.0 + 0.0 * xy[:, 1]]), ref)
    assert vec.shape == (1, 2)
    assert np.allclose(vec[0], [1.0 / 3.0, 2.0], atol=1e-14)


def test_element_mean_matches_dense_means_on_gaussian_data():
    from darcy_afem.cases import manufactured_case

    case = manufactured_case()
    mesh = build_uniform_unit_square(2)
    got = element_mean(case.data.g, mesh, degree=10)
    pts, wts = oracles.rule_as_xy(fc.triangle_rule(10))
    for t in range(mesh.n_triangles):
        coords = mesh.vertices[mesh.triangles[t]]
        phys = oracles.physical_points(coords, pts)
        area = oracles.tri_area(coords)
        dense = 2.0 * area * (wts @ case.data.g(phys)) / area
        assert abs(got[t] - dense) <= 1e-12 * max(1.0, abs(dense))
