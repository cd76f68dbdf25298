"""Discrete inf-sup estimates from MINRES Lanczos coefficients, plus a dense oracle.

With the ideal block preconditioner ``diag(A, M_Q)`` every negative eigenvalue
``mu`` of the preconditioned saddle operator satisfies ``mu (mu - 1) = sigma``
for an eigenvalue ``sigma`` of ``M_Q^+ B A^{-1} B^T``.  The negative eigenvalue
closest to zero therefore carries ``gamma^2 = mu (mu - 1)``, and the Ritz
values of the MINRES Lanczos tridiagonal approximate it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh_tridiagonal

from .linalg import DENSE_LIMIT, dense_generalized_eig, factorize


@dataclass
class InfSupEstimate:
    history: list  # estimate after each MINRES iteration, None where undefined
    final: float | None
    stabilized_at: int | None  # first iteration with |change| < 1e-4


def ritz_values(delta, gamma, j):
    """Eigenvalues of the ``j x j`` Lanczos tridiagonal (ascending)."""
    d = np.asarray(delta[:j], dtype=float)
    if j == 1:
        return d.copy()
    e = np.asarray(gamma[1:j], dtype=float)
    return eigvalsh_tridiagonal(d, e)


def est_minres(delta, gamma, j=None):
    """Inf-sup estimate ``gamma^2`` after ``j`` iterations, or None if no Ritz value is negative."""
    j = len(delta) if j is None else j
    if j < 1:
        return None
    theta = ritz_values(delta, gamma, j)
    neg = theta[theta < 0]
    if neg.size == 0:
        return None
    mu = neg.max()
    return float(mu * (mu - 1.0))


def estimate(delta, gamma, stable_tol=1e-4) -> InfSupEstimate:
    hist = [est_minres(delta, gamma, j) for j in range(1, len(delta) + 1)]
    final = next((h for h in reversed(hist) if h is not None), None)
    stab = None
    for j in range(1, len(hist)):
        if hist[j] is not None and hist[j - 1] is not None and abs(hist[j] - hist[j - 1]) < stable_tol:
            stab = j + 1
            break
    return InfSupEstimate(history=hist, final=final, stabilized_at=stab)


def attach_estimates(report):
    """Fill ``report.infsup_history`` (aligned with ``residual_history``)."""
    est = estimate(report.lanczos_delta, report.lanczos_gamma)
    report.infsup_history = [None] + est.history
    return est


def oracle_infsup(system, M_Q, hydrostatic=None, max_dim=DENSE_LIMIT):
    """Smallest eigenvalue of ``B A^{-1} B^T v = lam M_Q v`` off the trivial directions.

    ``null(M_Q)`` is deflated by the eigensolver; ``hydrostatic`` holds the
    pressure vectors of the constant function (enclosed flow), whose
    ``M_Q``-orthogonal complement is kept.
    """
    n_p = system.n_p
    if n_p > max_dim:
        raise ValueError(f"oracle refused: {n_p} pressure dofs > {max_dim}")
    B = system.B
    lu = factorize(system.A, symmetric=True)
    X = lu.solve(B.T.toarray())
    S = B @ X
    S = 0.5 * (S + S.T)
    M = M_Q.toarray() if sp.issparse(M_Q) else np.asarray(M_Q)
    lam, _ = dense_generalized_eig(S, M, deflate=hydrostatic, max_dim=max_dim)
    return float(lam[0])
