import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from twofield.assembly import (assemble_oseen, assemble_pcd, assemble_pressure_mass,
                               assemble_stokes, boundary_profiles, build_dofmap,
                               divergence_blocks, face_fluxes, inflow_robin, pressure_nullspace,
                               scalar_mass, velocity_mass_diagonal)
from twofield.linalg import read_triplets, write_triplets
from twofield.mesh import Mesh, build_cavity_mesh, build_square_mesh, build_step_mesh, face_topology

kinds = st.sampled_from(["triangle", "quad"])
domains = st.sampled_from(["cavity", "step"])


def _mesh(domain, level, kind):
    return (build_cavity_mesh if domain == "cavity" else build_step_mesh)(level, kind)


def _reference_triangle():
    m = Mesh(vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
             elements=np.array([[0, 1, 2]]), element_kind="triangle", grid_level=0,
             spacing=1.0, domain="cavity")
    return face_topology(m)


def _k(n_k, n_0):
    return np.concatenate([np.ones(n_k), -np.ones(n_0)])


def _rel_asym(M):
    M = sp.csr_matrix(M)
    return abs(M - M.T).max() / max(abs(M).max(), 1e-300)


@pytest.mark.parametrize("level, n_u, n_th, n_en", [
    (4, 2178, 289, 801), (5, 8450, 1089, 3137), (6, 33282, 4225, 12417)])
def test_dof_counts(level, n_u, n_th, n_en):
    m = build_cavity_mesh(level)
    th, en = build_dofmap(m, "TH"), build_dofmap(m, "enriched")
    assert (th.n_u, th.n_p) == (n_u, n_th)
    assert (en.n_u, en.n_p) == (n_u, n_en)
    assert en.n_0 == m.n_elements


def test_dirichlet_covers_boundary_nodes():
    m = build_cavity_mesh(3)
    dm = build_dofmap(m, "TH")
    x, y = dm.node_coords.T
    on_bnd = np.isclose(np.abs(x), 1) | np.isclose(np.abs(y), 1)
    nodes = dm.dirichlet[dm.dirichlet < dm.n_nodes]
    assert_array_equal(np.sort(nodes), np.flatnonzero(on_bnd))


def test_step_outflow_is_natural():
    dm = build_dofmap(build_step_mesh(2), "TH")
    nodes = dm.dirichlet[dm.dirichlet < dm.n_nodes]
    x, y = dm.node_coords[nodes].T
    # outflow corners belong to the walls; interior outflow nodes stay free
    assert not np.any(np.isclose(x, 5.0) & (np.abs(y) < 1 - 1e-12))


def test_boundary_profiles():
    lid = boundary_profiles("cavity2d")
    pts = np.array([[0.0, 1.0], [1.0, 1.0], [-1.0, 1.0], [0.5, -1.0]])
    vals = lid(pts, np.array(["lid", "lid", "lid", "wall"]))
    assert_allclose(vals[:, 0], [1.0, 0.0, 0.0, 0.0])
    assert_allclose(vals[:, 1], 0.0)
    inflow = boundary_profiles("step")
    assert_allclose(inflow(np.array([[-1.0, 0.5]]), np.array(["inflow"])), [[1.0, 0.0]])
    with pytest.raises(ValueError):
        boundary_profiles("channel")


def test_zero_boundary_data_gives_zero_rhs():
    # the cavity profile on the step has no lid, so every boundary value is zero
    system, _ = assemble_stokes(build_step_mesh(2), "enriched", "cavity2d")
    assert not np.any(system.f)
    assert not np.any(system.g)


@given(st.integers(1, 3), kinds, domains, st.sampled_from(["TH", "enriched"]))
@settings(max_examples=20, deadline=None)
def test_stokes_block_spd(level, kind, domain, space):
    s, _ = assemble_stokes(_mesh(domain, level, kind), space)
    assert _rel_asym(s.A) < 1e-13
    assert np.linalg.eigvalsh(s.A.toarray()).min() > 0


@given(st.integers(1, 4), kinds, domains)
@settings(max_examples=20, deadline=None)
def test_frame_nullspace(level, kind, domain):
    m = _mesh(domain, level, kind)
    s, dm = assemble_stokes(m, "enriched")
    M_Q = assemble_pressure_mass(m, "enriched").M_Q
    k = _k(dm.n_k, dm.n_0)
    scale = abs(M_Q).max()
    assert np.abs(M_Q @ k).max() <= 1e-14 * scale * 10
    assert np.abs(s.B.T @ k).max() <= 1e-13 * abs(s.B).max()
    assert _rel_asym(M_Q) < 1e-13


def test_pressure_mass_rank_and_th_definite():
    m = build_cavity_mesh(2)
    M_Q = assemble_pressure_mass(m, "enriched").M_Q.toarray()
    assert np.linalg.matrix_rank(M_Q) == M_Q.shape[0] - 1
    Qk = assemble_pressure_mass(m, "TH").M_Q.toarray()
    assert np.linalg.eigvalsh(Qk).min() > 0


def test_single_square_q0():
    blocks = assemble_pressure_mass(build_square_mesh(1), "enriched")
    assert_allclose(blocks.Q0.toarray(), np.diag([2.0, 2.0]))


def test_reference_triangle_mass_matrices():
    m = _reference_triangle()
    dm = build_dofmap(m, "TH")
    area = 0.5
    p1 = assemble_pressure_mass(m, "TH").Qk.toarray()
    assert_allclose(p1, area / 12 * (np.ones((3, 3)) + np.eye(3)), rtol=1e-14, atol=1e-16)
    # vertices 0,1,2 then midpoints of edges (0,1), (1,2), (2,0)
    ref = np.array([
        [6, -1, -1, 0, -4, 0],
        [-1, 6, -1, 0, 0, -4],
        [-1, -1, 6, -4, 0, 0],
        [0, 0, -4, 32, 16, 16],
        [-4, 0, 0, 16, 32, 16],
        [0, -4, 0, 16, 16, 32],
    ]) * area / 180
    local = scalar_mass(m, dm).toarray()[np.ix_(dm.element_nodes[0], dm.element_nodes[0])]
    assert_allclose(local, ref, rtol=1e-14, atol=1e-16)


def test_oseen_zero_wind_is_scaled_stokes():
    m = build_cavity_mesh(2)
    stokes, dm = assemble_stokes(m, "enriched")
    nu = 0.37
    oseen = assemble_oseen(m, "enriched", np.zeros(dm.n_u), nu, dofmap=dm)
    assert abs(oseen.A - nu * stokes.A).max() == 0.0
    assert abs(oseen.B1 - stokes.B1).max() == 0.0
    assert abs(oseen.B0 - stokes.B0).max() == 0.0


def test_oseen_rejects_bad_input():
    m = build_cavity_mesh(1)
    dm = build_dofmap(m)
    with pytest.raises(ValueError):
        assemble_oseen(m, "TH", np.zeros(dm.n_u), 0.0)
    with pytest.raises(ValueError):
        assemble_oseen(m, "TH", np.zeros(3), 1.0)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), kinds)
@settings(max_examples=15, deadline=None)
def test_convection_skew_on_interior(a, b, c, d, kind):
    # w = (a + b y^2, c + d x^2) is divergence-free and exactly representable
    m = build_cavity_mesh(2, kind)
    dm = build_dofmap(m, "TH")
    x, y = dm.node_coords.T
    w = np.concatenate([a + b * y**2, c + d * x**2])
    F = assemble_oseen(m, "TH", w, 1.0, dofmap=dm).A
    stokes, _ = assemble_stokes(m, "TH")
    N = (F - stokes.A).toarray()
    assert np.abs(N + N.T).max() <= 1e-12 * max(np.abs(N).max(), 1.0)


def test_step_oseen_nonsymmetric():
    from twofield.flow import FlowProblem, solve_stokes
    sol = solve_stokes(FlowProblem("step", "P2P1star", 4))
    F = assemble_oseen(sol.mesh, "enriched", sol.velocity, 1 / 50, dofmap=sol.dofmap).A
    assert abs(F - F.T).max() > 0


def test_b0_rows_are_element_fluxes():
    m = build_cavity_mesh(2)
    dm = build_dofmap(m, "enriched")
    B1, B0 = divergence_blocks(m, dm)
    x, y = dm.node_coords.T
    # u = (x, 0): div u = 1, so -int_T div u = -|T|
    u = np.concatenate([x, np.zeros_like(x)])
    assert_allclose(B0 @ u, -m.areas(), rtol=1e-13)
    u = np.concatenate([y, np.zeros_like(y)])
    assert_allclose(B0 @ u, 0.0, atol=1e-14)
    k = _k(dm.n_k, dm.n_0)
    assert np.abs(sp.vstack([B1, B0]).T @ k).max() < 1e-14


def test_f0_two_cell_stencil():
    m = build_square_mesh(1)
    dm = build_dofmap(m, "enriched")
    nu = 0.3
    ops = assemble_pcd(m, dm, np.zeros(dm.n_u), nu)
    c = m.centroids()
    coef = nu * 2 * np.sqrt(2) / np.linalg.norm(c[0] - c[1])
    assert_allclose(ops.F0.toarray(), coef * np.array([[1, -1], [-1, 1]]), rtol=1e-14)


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 1.0))
@settings(max_examples=15, deadline=None)
def test_f0_row_sums_and_upwinding(a, b, nu):
    m = build_cavity_mesh(2)
    dm = build_dofmap(m, "enriched")
    x, y = dm.node_coords.T
    w = np.concatenate([a * y, b * x])
    F0 = assemble_pcd(m, dm, w, nu).F0
    assert_allclose(np.asarray(F0.sum(axis=1)).ravel(), 0.0, atol=1e-13)
    off = F0.toarray() - np.diag(F0.diagonal())
    assert off.max() <= 1e-15


def test_f0_outflow_diagonal():
    from twofield.flow import FlowProblem, solve_stokes
    sol = solve_stokes(FlowProblem("step", "P2P1star", 2))
    F0 = assemble_pcd(sol.mesh, sol.dofmap, sol.velocity, 1.0).F0
    _, q_bnd = face_fluxes(sol.mesh, sol.dofmap, sol.velocity)
    out = sol.mesh.boundary_edges.tag == "outflow"
    # interior row sums vanish; outflow rows pick up the outgoing flux
    sums = np.asarray(F0.sum(axis=1)).ravel()
    expected = np.zeros(sol.mesh.n_elements)
    np.add.at(expected, sol.mesh.boundary_edges.elem[out], q_bnd[out])
    assert_allclose(sums, expected, atol=1e-12)


def test_f1_zero_wind_is_scaled_laplacian():
    m = build_cavity_mesh(2)
    dm = build_dofmap(m, "TH")
    ops = assemble_pcd(m, dm, np.zeros(dm.n_u), 0.5)
    ops1 = assemble_pcd(m, dm, np.zeros(dm.n_u), 1.0)
    assert_allclose(ops.F1.toarray(), 0.5 * ops1.F1.toarray(), rtol=1e-14)
    assert _rel_asym(ops.F1) < 1e-13
    assert_allclose(ops.F1 @ np.ones(dm.n_k), 0.0, atol=1e-13)


def test_f1_inflow_term():
    from twofield.flow import FlowProblem, solve_stokes
    sol = solve_stokes(FlowProblem("step", "P2P1", 3))
    plain = assemble_pcd(sol.mesh, sol.dofmap, sol.velocity, 0.02, inflow_bc="none").F1
    ones = np.ones(sol.dofmap.n_k)
    assert_allclose(plain @ ones, 0.0, atol=1e-12)
    robin = inflow_robin(sol.mesh, sol.dofmap, sol.velocity)
    # total inflow of 4y(1-y) over [0, 1]
    assert_allclose(ones @ robin @ ones, 2.0 / 3.0, rtol=1e-12)
    with pytest.raises(ValueError):
        assemble_pcd(sol.mesh, sol.dofmap, sol.velocity, 0.02, inflow_bc="dirichlet")


@pytest.mark.parametrize("kind, per_area", [("triangle", 19 / 30), ("quad", 0.64)])
def test_mass_diagonal_total(kind, per_area):
    m = build_cavity_mesh(3, kind)
    dm = build_dofmap(m, "TH")
    full = velocity_mass_diagonal(m, dm, free_only=False)
    assert np.all(full > 0)
    # two components over |D| = 4
    assert_allclose(full.sum(), 2 * per_area * 4.0, rtol=1e-13)


def test_pressure_nullspace_shapes():
    m = build_cavity_mesh(2)
    assert pressure_nullspace(build_dofmap(m, "enriched"), True).shape[1] == 2
    assert pressure_nullspace(build_dofmap(m, "enriched"), False).shape[1] == 1
    assert pressure_nullspace(build_dofmap(m, "TH"), True).shape[1] == 1
    assert pressure_nullspace(build_dofmap(m, "TH"), False).shape[1] == 0


def test_triplet_roundtrip(tmp_path):
    s, _ = assemble_stokes(build_cavity_mesh(2), "enriched")
    for name, M in (("A", s.A), ("B0", s.B0)):
        p = tmp_path / f"{name}.txt"
        write_triplets(M, p)
        back = read_triplets(p)
        assert back.shape == M.shape
        assert abs(back - M).max() == 0.0
        header = p.read_text().splitlines()[0].split()
        assert int(header[2]) == M.nnz
