"""Block preconditioners for Stokes (MINRES) and Oseen (GMRES) saddle systems.

Every preconditioner here is a callable ``r -> z`` approximating ``P^{-1} r``.
Pressure blocks built on the two-field frame are singular along
``k = [1; -1]`` (and along the hydrostatic constant for enclosed flow); their
solves are carried out on a bordered system that constrains the result to
be orthogonal to those directions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import PcdOperators, SaddleSystem
from .krylov import SolveReport, gmres
from .linalg import Factorization, factorize

log = logging.getLogger(__name__)


class NullspaceAugmentedSolver:
    """Solve ``M z = r`` subject to ``K^T z = 0`` via the bordered system.

    ``[[M, K], [K^T, 0]] [z; lam] = [r; 0]``.  For ``r`` consistent with
    ``range(M)`` the multiplier vanishes; otherwise ``M z = r - K lam``.
    """

    def __init__(self, M, K=None):
        M = sp.csr_matrix(M)
        n = M.shape[0]
        K = np.zeros((n, 0)) if K is None else np.asarray(K, dtype=float).reshape(n, -1)
        self.n = n
        self.K = K
        m = K.shape[1]
        if m:
            Ks = sp.csr_matrix(K)
            aug = sp.bmat([[M, Ks], [Ks.T, None]], format="csc")
        else:
            aug = M
        self._lu = factorize(aug, symmetric=True)
        self.multiplier = None

    def solve(self, r, return_multiplier=False):
        r = np.asarray(r, dtype=float)
        rhs = np.concatenate([r, np.zeros(self.K.shape[1])])
        sol = self._lu.solve(rhs)
        z, lam = sol[:self.n], sol[self.n:]
        self.multiplier = lam
        return (z, lam) if return_multiplier else z

    __call__ = solve


class BlockDiagonal:
    """``diag(velocity_solve, pressure_solve)`` for MINRES."""

    def __init__(self, n_u, velocity_solve, pressure_solve, name="", null=None):
        self.n_u = n_u
        self.velocity_solve = velocity_solve
        self.pressure_solve = pressure_solve
        self.name = name
        self.null = None if null is None or null.shape[1] == 0 else null
        self.warnings = 0

    def __call__(self, r):
        ru, rp = r[:self.n_u], r[self.n_u:]
        if self.null is not None:
            drift = np.abs(self.null.T @ rp).max()
            if drift > 1e-8 * (np.linalg.norm(rp) * np.linalg.norm(self.null, axis=0).max() + 1e-300):
                self.warnings += 1
                log.debug("pressure residual not orthogonal to the nullspace: %.2e", drift)
        return np.concatenate([self.velocity_solve(ru), self.pressure_solve(rp)])

    def __repr__(self):
        return f"BlockDiagonal({self.name})"


def mass_nullspace(n_k, n_0):
    """``k = [1_{n_k}; -1_{n_0}]`` as a column, or an empty basis for Taylor-Hood."""
    if n_0 == 0:
        return np.zeros((n_k, 0))
    return np.concatenate([np.ones(n_k), -np.ones(n_0)])[:, None]


def stokes_p1(system: SaddleSystem, M_Q) -> BlockDiagonal:
    """Exact velocity solve and exact (nullspace-constrained) pressure mass solve."""
    K = mass_nullspace(system.n_k, system.n_0)
    A_lu = factorize(system.A, symmetric=True)
    M_solver = NullspaceAugmentedSolver(M_Q, K)
    return BlockDiagonal(system.n_u, A_lu.solve, M_solver.solve, name="p1", null=K)


# -- Chebyshev-accelerated symmetric Gauss-Seidel --------------------------------

class ChebyshevSGS:
    """Fixed number of Chebyshev-accelerated symmetric Gauss-Seidel steps for ``M z = r``.

    The SGS iteration matrix ``G = I - W^{-1} M`` has its non-unit
    eigenvalues in ``[0, rho]``; ``rho`` is estimated by power iteration on
    the ``W``-orthogonal complement of ``null(M)``.  The resulting operator is
    a fixed polynomial in ``W^{-1} M`` times ``W^{-1}``, hence symmetric PSD.
    """

    def __init__(self, M, null=None, steps=20, power_steps=30, seed=0):
        M = sp.csr_matrix(M)
        self.M = M
        self.n = M.shape[0]
        self.steps = steps
        self.diag = M.diagonal()
        lower = sp.tril(M, format="csc")
        upper = sp.triu(M, format="csc")
        self._lower = spla.splu(lower, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True))
        self._upper = spla.splu(upper, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True))
        self._lower_mat, self._upper_mat = lower.tocsr(), upper.tocsr()
        self.null = None if null is None or np.size(null) == 0 else np.asarray(null, float).reshape(self.n, -1)
        self.rho = self._estimate_rho(power_steps, seed)

    def sgs(self, r):
        """Apply ``W^{-1}``, one symmetric Gauss-Seidel sweep from a zero guess."""
        y = self._lower.solve(r)
        return self._upper.solve(self.diag * y)

    def _w_product(self, x):
        return self._lower_mat @ ((self._upper_mat @ x) / self.diag)

    def _deflate(self, x):
        if self.null is None:
            return x
        N = self.null
        WN = np.column_stack([self._w_product(c) for c in N.T])
        coef = np.linalg.solve(N.T @ WN, WN.T @ x)
        return x - N @ coef

    def _estimate_rho(self, power_steps, seed):
        rng = np.random.default_rng(seed)
        x = self._deflate(rng.standard_normal(self.n))
        rho = 0.0
        for _ in range(power_steps):
            x = x / np.sqrt(x @ self._w_product(x))
            gx = self._deflate(x - self.sgs(self.M @ x))
            rho = float(x @ self._w_product(gx))  # W-Rayleigh quotient, x normalized
            x = gx
            if not np.any(x):
                return 0.0
        if not (np.isfinite(rho) and 0.0 <= rho < 1.0):
            log.warning("SGS spectral estimate failed (%r); using 0.999", rho)
            rho = 0.999
        return rho

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        lmin, lmax = 1.0 - self.rho, 1.0
        theta, delta = 0.5 * (lmax + lmin), 0.5 * (lmax - lmin)
        if delta <= 1e-14:
            return self.sgs(r) / theta
        sigma = theta / delta
        rho_k = 1.0 / sigma
        x = np.zeros_like(r)
        res = r.copy()
        d = self.sgs(res) / theta
        for k in range(self.steps):
            x += d
            if k == self.steps - 1:
                break
            res -= self.M @ d
            rho_new = 1.0 / (2.0 * sigma - rho_k)
            d = rho_new * rho_k * d + (2.0 * rho_new / delta) * self.sgs(res)
            rho_k = rho_new
        return x


class ProjectedApply:
    """``Pi C Pi`` with ``Pi`` the orthogonal projector off ``span(K)``."""

    def __init__(self, op, K):
        self.op = op
        self.K = None if K is None or K.shape[1] == 0 else np.linalg.qr(K)[0]

    def _project(self, x):
        return x if self.K is None else x - self.K @ (self.K.T @ x)

    def __call__(self, r):
        return self._project(self.op(self._project(r)))


def stokes_p2(system: SaddleSystem, M_Q, steps=20, power_steps=30) -> BlockDiagonal:
    """Exact velocity solve and Chebyshev/SGS pressure mass approximation.

    The velocity block is a direct solve where a production code would use an AMG V-cycle.
    """
    K = mass_nullspace(system.n_k, system.n_0)
    A_lu = factorize(system.A, symmetric=True)
    cheb = ChebyshevSGS(M_Q, null=K, steps=steps, power_steps=power_steps)
    pre = BlockDiagonal(system.n_u, A_lu.solve, ProjectedApply(cheb, K), name="p2", null=K)
    pre.cheb = cheb
    return pre


# -- Oseen: block triangular preconditioners -------------------------------------

class BlockTriangular:
    """Right preconditioner ``[[F, B^T], [0, -M_S]]``; applies its inverse.

    ``schur_inverse`` maps ``r_p`` to ``M_S^{-1} r_p``.
    """

    def __init__(self, F_solve, B, schur_inverse, name=""):
        self.F_solve = F_solve
        self.Bt = sp.csr_matrix(B.T)
        self.n_u = self.Bt.shape[0]
        self.schur_inverse = schur_inverse
        self.name = name

    def __call__(self, r):
        ru, rp = r[:self.n_u], r[self.n_u:]
        zp = -self.schur_inverse(rp)
        zu = self.F_solve(ru - self.Bt @ zp)
        return np.concatenate([zu, zp])

    def __repr__(self):
        return f"BlockTriangular({self.name})"


class MassSchur:
    """``M_S = (1/nu) M_Q``."""

    def __init__(self, M_Q, nu, null):
        self.nu = nu
        self.solver = NullspaceAugmentedSolver(M_Q, null)

    def __call__(self, r):
        return self.nu * self.solver(r)


def _pressure_blocks_solver(Q1, Q0):
    Q1_lu = factorize(Q1, symmetric=True)
    q0 = Q0.diagonal() if Q0.shape[0] else np.zeros(0)
    n_k = Q1.shape[0]

    def solve(r):
        return np.concatenate([Q1_lu.solve(r[:n_k]), r[n_k:] / q0])

    return solve


class PcdSchur:
    """Two-field pressure convection-diffusion Schur approximation.

    ``M_S = diag(Q1, Q0) diag(F1, F0)^{-1} (B Mdiag^{-1} B^T)``, so that
    ``M_S^{-1} r = (B Mdiag^{-1} B^T)^{-1} diag(F1, F0) diag(Q1, Q0)^{-1} r``.
    The coupling matrix is singular along ``null`` and is solved on the
    bordered system.  ``order="coupling-first"`` instead applies the factors in the
    reverse order (``Q^{-1} F_p X^{-1}``).
    """

    def __init__(self, ops: PcdOperators, B, null, order="mass-first"):
        B = sp.csr_matrix(B)
        n_k = ops.Q1.shape[0]
        self.n_k = n_k
        self.two_field = B.shape[0] > n_k
        X = (B @ sp.diags(1.0 / ops.Mdiag) @ B.T).tocsr()
        self.X = X
        self.X_solver = NullspaceAugmentedSolver(X, null)
        if self.two_field:
            self.Fp = sp.block_diag([ops.F1, ops.F0], format="csr")
            self.Q_solve = _pressure_blocks_solver(ops.Q1, ops.Q0)
        else:
            self.Fp = sp.csr_matrix(ops.F1)
            Q1_lu = factorize(ops.Q1, symmetric=True)
            self.Q_solve = Q1_lu.solve
        if order not in ("mass-first", "coupling-first"):
            raise ValueError(f"unknown PCD factor order {order!r}")
        self.order = order

    def __call__(self, r):
        if self.order == "mass-first":
            return self.X_solver(self.Fp @ self.Q_solve(r))
        return self.Q_solve(self.Fp @ self.X_solver(r))


class LscSchur:
    """Least-squares commutator approximation.

    ``M_S^{-1} = (B M^{-1} B^T)^{-1} (B M^{-1} F H^{-1} B^T) (B H^{-1} B^T)^{-1}``
    with ``M`` the velocity mass diagonal and ``H = D^{-1/2} M D^{-1/2}``.
    """

    def __init__(self, F, B, Mdiag, null, D=None):
        B = sp.csr_matrix(B)
        D = np.ones_like(Mdiag) if D is None else np.asarray(D, float)
        if np.any(D <= 0):
            raise ValueError("LSC scaling must be strictly positive")
        self.D = D
        self.Hdiag = Mdiag / D
        Minv = sp.diags(1.0 / Mdiag)
        Hinv = sp.diags(1.0 / self.Hdiag)
        self.BH = B @ Hinv @ B.T
        self.BM = B @ Minv @ B.T
        self.middle = (B @ Minv @ F @ Hinv @ B.T).tocsr()
        self.BH_solver = NullspaceAugmentedSolver(self.BH, null)
        self.BM_solver = NullspaceAugmentedSolver(self.BM, null)

    def __call__(self, r):
        y1 = self.BH_solver(r)
        return self.BM_solver(self.middle @ y1)


def oseen_m1(system: SaddleSystem, M_Q, nu, F_lu: Factorization | None = None) -> BlockTriangular:
    K = mass_nullspace(system.n_k, system.n_0)
    F_lu = F_lu or factorize(system.A)
    return BlockTriangular(F_lu.solve, system.B, MassSchur(M_Q, nu, K), name="m1")


def oseen_m2(system: SaddleSystem, ops: PcdOperators, null, F_lu=None, order="mass-first") -> BlockTriangular:
    F_lu = F_lu or factorize(system.A)
    return BlockTriangular(F_lu.solve, system.B, PcdSchur(ops, system.B, null, order=order), name="m2")


def oseen_m3(system: SaddleSystem, Mdiag, null, F_lu=None, D=None) -> BlockTriangular:
    F_lu = F_lu or factorize(system.A)
    schur = LscSchur(system.A, system.B, Mdiag, null, D=D)
    return BlockTriangular(F_lu.solve, system.B, schur, name="m3")


# -- two-stage PCD ----------------------------------------------------------------

@dataclass
class TwoStageResult:
    solution: np.ndarray
    stage1: SolveReport
    stage2: SolveReport
    transition_residual: float
    rhs_norm: float  # ||[f; g1]||, initial residual of the reduced system
    reduced_term: float  # c * eta * ||[f; g1]||
    local_term: float  # ||g0 - B0 u1||
    notes: list = field(default_factory=list)

    @property
    def bound(self) -> float:
        return float(np.sqrt(self.reduced_term**2 + self.local_term**2))

    @property
    def bound_slack(self) -> float:
        return self.bound**2 - self.transition_residual**2


def _gmres_true_tol(A, b, M, tol, maxit, x0=None):
    """GMRES until the *true* residual is below ``tol``, restarting on drift."""
    rep = gmres(A, b, M, atol=tol, maxit=maxit, x0=x0)
    history = list(rep.residual_history)
    x, its = rep.solution, rep.iterations
    while rep.converged and its < maxit:
        true = np.linalg.norm(b - A(x))
        if true <= tol:
            break
        history[-1] = true
        rep = gmres(A, b, M, atol=tol, maxit=maxit - its, x0=x)
        history += rep.residual_history[1:]
        x, its = rep.solution, its + rep.iterations
    converged = np.linalg.norm(b - A(x)) <= tol * (1 + 1e-12)
    return SolveReport(solution=x, iterations=its, residual_history=history,
                       converged=converged, wall_time=rep.wall_time)


def two_stage_solve(system: SaddleSystem, M_Q, ops: PcdOperators, nu, eta=1e-4, c=10.0,
                    enclosed=False, maxit=400, absolute_eta=False, order="mass-first",
                    F_lu=None) -> TwoStageResult:
    """Two-stage PCD solve of the enriched Oseen system.

    Stage I runs GMRES on the Taylor-Hood system ``[[F, B1^T], [B1, 0]]``
    with single-field PCD from a zero guess until the residual is ``c*eta``
    times its initial value.  Stage II runs GMRES with the ``M1`` block
    preconditioner on the full system from ``[u1, q1, 0]`` until the
    residual is below ``eta * ||rhs||`` (or ``eta`` if ``absolute_eta``).
    """
    if system.n_0 == 0:
        raise ValueError("two-stage solve requires the enriched pressure space")
    F_lu = F_lu or factorize(system.A)
    n_u, n_k = system.n_u, system.n_k

    red = system.reduced()
    b_red = red.rhs
    rhs_norm = float(np.linalg.norm(b_red))
    null_red = np.ones((n_k, 1)) if enclosed else np.zeros((n_k, 0))
    pre1 = BlockTriangular(F_lu.solve, red.B, PcdSchur(ops, red.B1, null_red, order=order),
                           name="pcd")
    stage1 = _gmres_true_tol(red.matvec, b_red, pre1, c * eta * rhs_norm, maxit)
    if not stage1.converged:
        raise RuntimeError(f"stage I did not converge in {maxit} iterations "
                           f"(residual {stage1.residual_history[-1]:.3e})")

    u1, q1 = stage1.solution[:n_u], stage1.solution[n_u:]
    x0 = np.concatenate([u1, q1, np.zeros(system.n_0)])
    b = system.rhs
    transition = float(np.linalg.norm(b - system.matvec(x0)))
    local = float(np.linalg.norm(system.g[n_k:] - system.B0 @ u1))

    target = eta if absolute_eta else eta * float(np.linalg.norm(b))
    pre2 = oseen_m1(system, M_Q, nu, F_lu=F_lu)
    stage2 = _gmres_true_tol(system.matvec, b, pre2, target, maxit, x0=x0)
    return TwoStageResult(solution=stage2.solution, stage1=stage1, stage2=stage2,
                          transition_residual=transition, rhs_norm=rhs_norm,
                          reduced_term=c * eta * rhs_norm, local_term=local)
