import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from twofield.assembly import assemble_pressure_mass, assemble_stokes
from twofield.infsup import attach_estimates, est_minres, estimate, oracle_infsup, ritz_values
from twofield.krylov import minres
from twofield.linalg import factorize, nullspace_basis
from twofield.mesh import build_cavity_mesh, build_square_mesh
from twofield.precond import stokes_p1


def _cavity(level, space, kind="triangle", n=None):
    m = build_square_mesh(n, kind) if n else build_cavity_mesh(level, kind)
    s, dm = assemble_stokes(m, space, "cavity2d")
    M_Q = assemble_pressure_mass(m, space).M_Q
    hyd = np.concatenate([np.ones(dm.n_k), np.zeros(dm.n_0)])
    return s, M_Q, hyd


def test_ritz_values_small():
    assert_allclose(ritz_values([2.0], [1.0], 1), [2.0])
    assert_allclose(ritz_values([0.0, 0.0], [1.0, 3.0], 2), [-3.0, 3.0])


def test_undefined_without_negative_ritz_value():
    assert est_minres([1.0], [1.0], 1) is None
    assert est_minres([1.0], [1.0], 0) is None
    est = estimate([1.0, 2.0], [1.0, 0.1])
    assert est.final is None and est.history == [None, None]


@given(st.lists(st.floats(0.2, 3.0), min_size=2, max_size=8, unique=True),
       st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_recovers_smallest_singular_value(sigmas, seed):
    # A = I, M_Q = I: the preconditioned negative eigenvalues are
    # (1 - sqrt(1 + 4 sigma^2)) / 2, so gamma^2 = min sigma^2
    rng = np.random.default_rng(seed)
    n_p = len(sigmas)
    n_u = n_p + 3
    U, _ = np.linalg.qr(rng.standard_normal((n_p, n_p)))
    V, _ = np.linalg.qr(rng.standard_normal((n_u, n_p)))
    B = U @ np.diag(sigmas) @ V.T
    K = np.block([[np.eye(n_u), B.T], [B, np.zeros((n_p, n_p))]])
    b = rng.standard_normal(n_u + n_p)
    rep = minres(K, b, None, rtol=1e-12, maxit=100)
    est = attach_estimates(rep)
    assert_allclose(est.final, min(sigmas) ** 2, rtol=1e-6)
    assert len(rep.infsup_history) == len(rep.residual_history)


@pytest.mark.parametrize("space, rtol", [("TH", 0.005), ("enriched", 0.01)])
def test_oracle_agrees_with_estimate_level3(space, rtol):
    s, M_Q, hyd = _cavity(3, space)
    rep = minres(s.matvec, s.rhs, stokes_p1(s, M_Q), rtol=1e-8)
    est = attach_estimates(rep)
    assert_allclose(est.final, oracle_infsup(s, M_Q, hydrostatic=hyd), rtol=rtol)


def test_oracle_level4_th():
    s, M_Q, hyd = _cavity(4, "TH")
    assert abs(oracle_infsup(s, M_Q, hydrostatic=hyd) - 0.1947) <= 0.002


def test_oracle_refuses_large():
    s, M_Q, hyd = _cavity(2, "TH")
    with pytest.raises(ValueError):
        oracle_infsup(s, M_Q, hydrostatic=hyd, max_dim=10)


def test_small_enriched_mesh_positive_after_deflation():
    s, M_Q, hyd = _cavity(None, "enriched", n=2)
    N = nullspace_basis(M_Q.toarray())
    assert N.shape[1] == 1
    k = np.concatenate([np.ones(s.n_k), -np.ones(s.n_0)])
    assert_allclose(np.abs(N[:, 0]), np.abs(k) / np.linalg.norm(k), rtol=1e-10)
    assert oracle_infsup(s, M_Q, hydrostatic=hyd) > 0.05


def test_estimates_distinguish_spaces_level4():
    finals = {}
    for space in ("TH", "enriched"):
        s, M_Q, _ = _cavity(4, space)
        rep = minres(s.matvec, s.rhs, stokes_p1(s, M_Q), rtol=1e-8)
        est = attach_estimates(rep)
        finals[space] = est
        assert all(h is None or np.isfinite(h) for h in est.history)
        assert est.stabilized_at is not None
    assert finals["TH"].final - finals["enriched"].final > 0.04
    # a good approximation after 25 iterations
    e = finals["enriched"]
    assert abs(e.history[24] - e.final) <= 0.05 * e.final


@pytest.mark.parametrize("alpha", [1.0, 1e3])
def test_lanczos_coefficients_ignore_nullspace_shift(alpha):
    s, M_Q, _ = _cavity(3, "enriched")
    P = stokes_p1(s, M_Q)
    base = minres(s.matvec, s.rhs, P, rtol=1e-8)
    w = np.concatenate([np.zeros(s.n_u), np.ones(s.n_k), -np.ones(s.n_0)])
    shifted = minres(s.matvec, s.rhs, P, rtol=1e-8, x0=alpha * w)
    n = min(len(base.lanczos_delta), len(shifted.lanczos_delta))
    scale = max(np.abs(base.lanczos_delta).max(), 1.0)
    assert np.abs(np.subtract(base.lanczos_delta[:n], shifted.lanczos_delta[:n])).max() <= 1e-12 * scale
    assert np.abs(np.subtract(base.lanczos_gamma[:n], shifted.lanczos_gamma[:n])).max() <= 1e-12 * scale
