"""Sparse kernels, direct factorizations and a dense deflated eigensolver.

Sparse storage is scipy's CSR; direct solves use SuperLU.  The dense
generalized eigensolver is an oracle for small problems only.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DENSE_LIMIT = 3000


class FactorizationError(RuntimeError):
    """Matrix is singular to working precision."""


def assemble_triplets(rows, cols, vals, shape) -> sp.csr_matrix:
    """CSR matrix from coordinate triplets, duplicates summed, indices sorted."""
    A = sp.coo_matrix((np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))),
                      shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


class Factorization:
    """Sparse LU factorization with ``solve`` and a residual guarantee.

    ``perturbed`` is set when a static diagonal perturbation had to be added
    to get past a zero pivot; solves then apply one step of iterative
    refinement against the unperturbed matrix.
    """

    def __init__(self, A, symmetric=False, allow_perturbation=False, pivot_tol=1e-13):
        A = sp.csc_matrix(A, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        self.A = A
        self.symmetric = symmetric
        self.perturbed = False
        self.shape = A.shape
        try:
            self._lu = self._factor(A, pivot_tol)
        except FactorizationError:
            if not allow_perturbation:
                raise
            delta = np.sqrt(np.finfo(float).eps) * abs(A).max()
            log.warning("static pivot perturbation %.3e applied", delta)
            self._lu = self._factor(A + delta * sp.identity(A.shape[0], format="csc"), pivot_tol)
            self.perturbed = True

    def _factor(self, A, pivot_tol):
        if A.shape[0] == 0:
            return None
        opts = dict(permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.1) if self.symmetric else {}
        try:
            lu = spla.splu(A, **opts)
        except RuntimeError as exc:  # "Factor is exactly singular"
            raise FactorizationError(str(exc)) from exc
        d = np.abs(lu.U.diagonal())
        if d.min() <= pivot_tol * max(d.max(), 1e-300):
            raise FactorizationError(
                f"pivot ratio {d.min() / d.max():.2e} below {pivot_tol:.0e}")
        return lu

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self._lu is None:
            return np.zeros_like(b)
        x = self._lu.solve(b)
        if self.perturbed:
            x = x + self._lu.solve(b - self.A @ x)
        return x

    __call__ = solve


def factorize(A, symmetric: bool = False, allow_perturbation: bool = False) -> Factorization:
    return Factorization(A, symmetric=symmetric, allow_perturbation=allow_perturbation)


def write_triplets(A, path) -> None:
    """Write ``rows cols nnz`` then ``i j value`` lines (0-based, round-trip floats)."""
    A = sp.coo_matrix(A)
    A.sum_duplicates()
    order = np.lexsort((A.col, A.row))
    lines = [f"{A.shape[0]} {A.shape[1]} {A.nnz}"]
    lines += [f"{i} {j} {v!r}" for i, j, v in
              zip(A.row[order].tolist(), A.col[order].tolist(), A.data[order].tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_triplets(path) -> sp.csr_matrix:
    with open(path) as fh:
        m, n, nnz = map(int, fh.readline().split())
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    return assemble_triplets(data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2], (m, n))


def nullspace_basis(B, rtol=1e-10):
    """Orthonormal basis of the numerical nullspace of a symmetric PSD matrix."""
    w, V = np.linalg.eigh(B)
    return V[:, w <= rtol * max(abs(w).max(), 1e-300)]


def dense_generalized_eig(A, B, deflate=None, complement=None, max_dim=DENSE_LIMIT):
    """Finite eigenvalues of ``A v = lam B v`` for symmetric ``A`` and PSD ``B``.

    ``null(B)`` is computed and deflated explicitly; ``deflate`` holds extra
    columns ``c`` whose ``B``-orthogonal complement is kept (eigenvectors
    with ``c^T B v = 0``).  ``complement`` optionally fixes the basis used to
    complete ``null(B)``; results do not depend on it.  Returns ``(lam, V)``
    with ascending eigenvalues.
    """
    A = A.toarray() if sp.issparse(A) else np.asarray(A, float)
    B = B.toarray() if sp.issparse(B) else np.asarray(B, float)
    n = A.shape[0]
    if n > max_dim:
        raise ValueError(f"dense eigensolver refused: dimension {n} > {max_dim}")
    N = nullspace_basis(B)
    if complement is None:
        # orthogonal complement of null(B)
        Q, _ = np.linalg.qr(np.hstack([N, np.eye(n)]))
        Z = Q[:, N.shape[1]:n]
    else:
        Z = np.asarray(complement, float)
    if deflate is not None:
        C = B @ np.asarray(deflate, float).reshape(n, -1)
        # keep y with (Z y)^T B c = 0
        K = sla.null_space((Z.T @ C).T)
        Z = Z @ K
    Ar = Z.T @ A @ Z
    Br = Z.T @ B @ Z
    lam, Y = sla.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
    return lam, Z @ Y
