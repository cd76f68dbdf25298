import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from twofield.assembly import (SaddleSystem, assemble_oseen, assemble_pcd, assemble_pressure_mass,
                               assemble_stokes, build_dofmap, pressure_nullspace)
from twofield.flow import FlowProblem, picard_oseen
from twofield.krylov import minres
from twofield.mesh import build_cavity_mesh
from twofield.precond import (BlockTriangular, ChebyshevSGS, LscSchur, NullspaceAugmentedSolver,
                              PcdSchur, mass_nullspace, oseen_m1, stokes_p1, stokes_p2,
                              two_stage_solve)

seeds = st.integers(0, 2**31 - 1)


def _mass(level, space="enriched", kind="triangle"):
    m = build_cavity_mesh(level, kind)
    return m, assemble_pressure_mass(m, space).M_Q


def _dense(op, n):
    return np.column_stack([op(e) for e in np.eye(n)])


def test_augmented_solver_random_consistent():
    m, M_Q = _mass(2)
    k = mass_nullspace(m.n_vertices, m.n_elements)
    solver = NullspaceAugmentedSolver(M_Q, k)
    rng = np.random.default_rng(7)
    R = M_Q @ rng.standard_normal((M_Q.shape[0], 1000))
    for r in R.T:
        z, lam = solver.solve(r, return_multiplier=True)
        assert abs(k[:, 0] @ z) <= 1e-12 * np.linalg.norm(z)
        assert np.linalg.norm(M_Q @ z - r + lam[0] * k[:, 0]) <= 1e-10 * np.linalg.norm(r)


def test_augmented_solver_pure_nullspace_input():
    m, M_Q = _mass(2)
    k = mass_nullspace(m.n_vertices, m.n_elements)
    z, lam = NullspaceAugmentedSolver(M_Q, k).solve(k[:, 0], return_multiplier=True)
    assert np.abs(z).max() < 1e-10
    assert_allclose(lam, [1.0])


def test_p1_nullspace_residual():
    m = build_cavity_mesh(2)
    s, dm = assemble_stokes(m, "enriched")
    P = stokes_p1(s, assemble_pressure_mass(m).M_Q)
    k = mass_nullspace(s.n_k, s.n_0)[:, 0]
    z = P(np.concatenate([np.zeros(s.n_u), k]))
    assert np.abs(z).max() < 1e-10
    assert P.warnings == 1  # k is not orthogonal to itself


def test_p1_iterations_mesh_independent():
    counts = []
    for level in (2, 3, 4):
        m = build_cavity_mesh(level)
        s, _ = assemble_stokes(m, "enriched")
        P = stokes_p1(s, assemble_pressure_mass(m).M_Q)
        rep = minres(s.matvec, s.rhs, P, rtol=1e-8)
        assert rep.converged and P.warnings == 0
        counts.append(rep.iterations)
    assert max(counts) - min(counts) <= 5


def test_chebyshev_identity_and_diagonal():
    n = 7
    cheb = ChebyshevSGS(sp.identity(n, format="csr"))
    assert cheb.rho == 0.0
    r = np.arange(1.0, n + 1)
    assert_allclose(cheb(r), r)
    d = np.linspace(1, 3, n)
    cheb = ChebyshevSGS(sp.diags(d, format="csr"))
    assert cheb.rho == 0.0
    assert_allclose(cheb(r), r / d, rtol=1e-15)


@pytest.mark.parametrize("space, kind", [("TH", "triangle"), ("enriched", "triangle"),
                                         ("enriched", "quad")])
def test_chebyshev_operator_symmetric_psd(space, kind):
    m, M_Q = _mass(2, space, kind)
    n = M_Q.shape[0]
    K = mass_nullspace(m.n_vertices, m.n_elements if space == "enriched" else 0)
    s, _ = assemble_stokes(m, space)
    P = stokes_p2(s, M_Q)
    C = _dense(P.pressure_solve, n)
    assert np.abs(C - C.T).max() <= 1e-10 * np.abs(C).max()
    ev = np.linalg.eigvalsh(0.5 * (C + C.T))
    assert ev.min() >= -1e-10 * ev.max()
    if K.shape[1]:
        assert np.abs(C @ K).max() <= 1e-10 * np.abs(C).max()
    # Chebyshev iterate approaches the true mass solve on the complement
    r = M_Q @ np.random.default_rng(0).standard_normal(n)
    z = P.pressure_solve(r)
    assert np.linalg.norm(M_Q @ z - r) < 0.5 * np.linalg.norm(r)


def _sgs_rho(M_Q):
    """``1 - smallest nonzero eigenvalue of W^{-1} M`` by shift-invert Lanczos."""
    M = M_Q.tocsc()
    d = M.diagonal()
    W = (sp.tril(M) @ sp.diags(1 / d) @ sp.triu(M)).tocsc()
    vals = spla.eigsh(M, k=3, M=0.5 * (W + W.T), sigma=-1e-3, which="LM",
                      return_eigenvectors=False)
    return 1.0 - np.sort(vals)[1]


def test_sgs_contraction_approaches_one():
    rho = [_sgs_rho(_mass(level)[1]) for level in (4, 5, 6)]
    assert rho[0] < rho[1] < rho[2] < 1.0
    # the power-iteration estimate is a Rayleigh quotient, never above the true value
    m, M_Q = _mass(4)
    cheb = ChebyshevSGS(M_Q, mass_nullspace(m.n_vertices, m.n_elements))
    assert 0.9 < cheb.rho <= rho[0] + 1e-12


def test_p1_mass_jacobi_spectrum():
    _, Qk = _mass(4, "TH")
    d = Qk.diagonal() ** -0.5
    ev = np.linalg.eigvalsh((sp.diags(d) @ Qk @ sp.diags(d)).toarray())
    assert ev.min() > 0 and ev.max() <= 3.0


def test_lsc_cancellation():
    m = build_cavity_mesh(2)
    s, dm = assemble_stokes(m, "enriched")
    Mdiag = assemble_pcd(m, dm, np.zeros(dm.n_u), 1.0).Mdiag
    null = pressure_nullspace(dm, True)
    lsc = LscSchur(sp.diags(Mdiag), s.B, Mdiag, null)
    X = lsc.BM
    Q, _ = np.linalg.qr(null)
    r = np.random.default_rng(3).standard_normal(s.n_p)
    r -= Q @ (Q.T @ r)
    assert_allclose(lsc(X @ r), r, atol=1e-9 * np.linalg.norm(r))
    with pytest.raises(ValueError):
        LscSchur(sp.diags(Mdiag), s.B, Mdiag, null, D=-np.ones_like(Mdiag))


@given(seeds)
@settings(max_examples=10, deadline=None)
def test_pcd_preserves_complement(seed):
    m = build_cavity_mesh(2)
    dm = build_dofmap(m, "enriched")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(dm.n_u)
    s = assemble_oseen(m, "enriched", w, 0.1, dofmap=dm)
    null = pressure_nullspace(dm, True)
    ops = assemble_pcd(m, dm, w, 0.1)
    pcd = PcdSchur(ops, s.B, null)
    k = null[:, 0]
    r = rng.standard_normal(s.n_p)
    r -= k * (k @ r) / (k @ k)
    z = pcd(r)
    assert abs(k @ z) <= 1e-10 * np.linalg.norm(z) * np.linalg.norm(k)
    with pytest.raises(ValueError):
        PcdSchur(ops, s.B, null, order="sideways")


@pytest.mark.parametrize("level", [2, 3])
def test_pcd_stokes_limit_bounded_spectrum(level):
    m = build_cavity_mesh(level)
    s, dm = assemble_stokes(m, "TH")
    ops = assemble_pcd(m, dm, np.zeros(dm.n_u), 1.0, inflow_bc="none")
    null = np.ones((dm.n_k, 1))
    M_inv = _dense(PcdSchur(ops, s.B, null), dm.n_k)
    B = s.B.toarray()
    S = B @ np.linalg.solve(s.A.toarray(), B.T)
    Z = np.linalg.qr(np.hstack([null, np.eye(dm.n_k)[:, 1:]]))[0][:, 1:]
    ev = np.linalg.eigvals(Z.T @ M_inv @ S @ Z)
    assert np.abs(ev.imag).max() < 1e-8
    assert ev.real.min() > 0.1 and ev.real.max() < 2.0


def test_m1_unit_viscosity_is_mass_solve():
    m = build_cavity_mesh(2)
    s, dm = assemble_stokes(m, "enriched")
    M_Q = assemble_pressure_mass(m).M_Q
    pre = oseen_m1(s, M_Q, 1.0)
    k = mass_nullspace(s.n_k, s.n_0)
    rp = M_Q @ np.random.default_rng(1).standard_normal(s.n_p)
    z = pre(np.concatenate([np.zeros(s.n_u), rp]))
    zp = z[s.n_u:]
    assert_allclose(M_Q @ zp, -rp, atol=1e-10 * np.linalg.norm(rp))
    # velocity part completes the block-triangular solve
    assert_allclose(s.A @ z[:s.n_u], -s.B.T @ zp, atol=1e-10 * np.linalg.norm(rp))
    assert abs(k[:, 0] @ zp) < 1e-10 * np.linalg.norm(zp)


def test_block_triangular_exact_schur_is_exact():
    m = build_cavity_mesh(1)
    s, dm = assemble_stokes(m, "TH")
    A = s.A.toarray()
    B = s.B.toarray()
    S = B @ np.linalg.solve(A, B.T)
    pre = BlockTriangular(lambda r: np.linalg.solve(A, r), s.B, lambda r: np.linalg.lstsq(S, r, rcond=None)[0])
    K = s.matrix().toarray()
    x = np.random.default_rng(0).standard_normal(s.n_u + s.n_p)
    # right preconditioning by the exact factor gives an upper triangular
    # product with unit velocity block
    y = K @ pre(x)
    assert_allclose(y[:s.n_u], x[:s.n_u], atol=1e-10)


@pytest.fixture(scope="module")
def cavity_bench():
    return picard_oseen(FlowProblem("cavity2d", "P2P1star", 3), steps=3)


def test_two_stage_bound_and_determinism(cavity_bench):
    b = cavity_bench
    ops = assemble_pcd(b.mesh, b.dofmap, b.wind, b.nu)
    run = lambda: two_stage_solve(b.system, b.M_Q, ops, b.nu, enclosed=True)
    res = run()
    assert res.stage1.converged and res.stage2.converged
    assert res.bound_slack >= 0
    assert res.transition_residual <= res.bound
    assert np.linalg.norm(b.system.residual(res.solution)) <= 1e-4 * np.linalg.norm(b.system.rhs)
    again = run()
    assert np.array_equal(res.solution, again.solution)
    assert res.stage1.residual_history == again.stage1.residual_history


def test_two_stage_divergence_free_intermediate(cavity_bench):
    # zero the local-conservation rows: the bound reduces to c*eta*||f||
    s = cavity_bench.system
    B0 = sp.csr_matrix(s.B0.shape)
    g = s.g.copy()
    g[s.n_k:] = 0.0
    synthetic = SaddleSystem(s.A, s.B1, B0, s.f, g, symmetric=False)
    b = cavity_bench
    ops = assemble_pcd(b.mesh, b.dofmap, b.wind, b.nu)
    res = two_stage_solve(synthetic, b.M_Q, ops, b.nu, enclosed=True)
    assert res.local_term == 0.0
    assert res.transition_residual <= res.reduced_term


def test_two_stage_requires_enriched():
    m = build_cavity_mesh(1)
    s, dm = assemble_stokes(m, "TH")
    with pytest.raises(ValueError):
        two_stage_solve(s, None, None, 1.0)
