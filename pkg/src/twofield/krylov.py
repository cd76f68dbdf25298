"""Preconditioned MINRES and right-preconditioned full GMRES.

Both solvers take operators as callables (or anything with ``@``) and return
a :class:`SolveReport` holding the complete convergence history.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np


class IndefinitePreconditionerError(ArithmeticError):
    """``<z, v>`` came out negative, so the preconditioner is not PSD."""


@dataclass
class SolveReport:
    solution: np.ndarray
    iterations: int
    residual_history: list
    converged: bool
    wall_time: float = 0.0
    lanczos_delta: list = field(default_factory=list)
    lanczos_gamma: list = field(default_factory=list)
    infsup_history: list | None = None
    notes: list = field(default_factory=list)

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1]


def as_apply(op):
    if op is None:
        return lambda x: x
    if callable(op) and not hasattr(op, "shape"):
        return op
    return lambda x: op @ x


def minres(A, b, P=None, rtol=1e-8, maxit=500, x0=None):
    """Preconditioned MINRES for symmetric ``A`` and symmetric PSD ``P``.

    ``P`` maps a residual ``v`` to ``z`` with ``P z = v``.  Iteration stops
    when the preconditioned residual norm ``||r_j||_{P^-1}`` drops below
    ``rtol`` times its initial value.  The Lanczos scalars ``delta_j`` and
    ``gamma_j`` are recorded for inf-sup estimation.
    """
    t0 = time.perf_counter()
    A, P = as_apply(A), as_apply(P)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)

    v_old = np.zeros_like(b)
    w_old = np.zeros_like(b)  # w^(j-1)
    w = np.zeros_like(b)  # w^(j)
    v = b - A(x) if x0 is not None else b.copy()
    z = P(v)
    gamma = _pnorm(z, v)  # gamma_1
    gamma_old = 0.0
    eta = gamma
    s_old = s = 0.0
    c_old = c = 1.0

    history = [gamma]
    deltas, gammas = [], [gamma]
    converged = gamma == 0.0
    j = 0
    while not converged and j < maxit:
        j += 1
        z = z / gamma
        Az = A(z)
        delta = float(Az @ z)
        v_new = Az - (delta / gamma) * v
        if j > 1:
            v_new -= (gamma / gamma_old) * v_old
        z_new = P(v_new)
        gamma_new = _pnorm(z_new, v_new)

        a0 = c * delta - c_old * s * gamma
        a1 = np.hypot(a0, gamma_new)
        a2 = s * delta + c_old * c * gamma
        a3 = s_old * gamma
        c_new, s_new = a0 / a1, gamma_new / a1
        w_new = (z - a3 * w_old - a2 * w) / a1
        x = x + c_new * eta * w_new
        eta = -s_new * eta

        deltas.append(delta)
        gammas.append(gamma_new)
        history.append(abs(eta))

        v_old, v = v, v_new
        z = z_new
        w_old, w = w, w_new
        gamma_old, gamma = gamma, gamma_new
        c_old, c = c, c_new
        s_old, s = s, s_new
        converged = abs(eta) <= rtol * history[0] or gamma == 0.0

    return SolveReport(solution=x, iterations=j, residual_history=history,
                       converged=converged, wall_time=time.perf_counter() - t0,
                       lanczos_delta=deltas, lanczos_gamma=gammas)


def _pnorm(z, v):
    val = float(z @ v)
    if val < 0.0:
        scale = np.linalg.norm(z) * np.linalg.norm(v)
        if val < -1e-12 * scale:
            raise IndefinitePreconditionerError(f"<z, v> = {val:.3e} < 0")
        val = 0.0
    return np.sqrt(val)


def gmres(A, b, M=None, rtol=None, atol=None, maxit=400, x0=None, reorth=0.7):
    """Full GMRES with right preconditioning ``A M^{-1} y = b``.

    Minimizes the true Euclidean residual over ``x0 + M^{-1} K_j``.  Stops
    when the residual falls below ``max(atol, rtol * ||r0||)``.  Modified
    Gram-Schmidt with one extra pass when the new vector loses more than
    ``1 - reorth`` of its norm.  ``M`` maps ``r`` to ``M^{-1} r``.
    """
    t0 = time.perf_counter()
    A, M = as_apply(A), as_apply(M)
    b = np.asarray(b, dtype=float)
    n = b.size
    x0 = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r0 = b - A(x0) if np.any(x0) else b.copy()
    beta = float(np.linalg.norm(r0))
    tol = max(atol or 0.0, (rtol or 0.0) * beta)
    history = [beta]
    notes = []
    if beta <= tol or beta == 0.0 or maxit == 0:
        return SolveReport(solution=x0, iterations=0, residual_history=history,
                           converged=beta <= tol, wall_time=time.perf_counter() - t0)

    V = np.empty((maxit + 1, n))
    H = np.zeros((maxit + 1, maxit))
    cs, sn = np.zeros(maxit), np.zeros(maxit)
    g = np.zeros(maxit + 1)
    g[0] = beta
    V[0] = r0 / beta
    converged = False
    k = 0
    for j in range(maxit):
        w = A(M(V[j]))
        norm_in = np.linalg.norm(w)
        for i in range(j + 1):
            H[i, j] = V[i] @ w
            w -= H[i, j] * V[i]
        hnext = np.linalg.norm(w)
        if hnext < reorth * norm_in:
            for i in range(j + 1):
                corr = V[i] @ w
                H[i, j] += corr
                w -= corr * V[i]
            hnext = np.linalg.norm(w)
        H[j + 1, j] = hnext

        for i in range(j):
            hi, hi1 = H[i, j], H[i + 1, j]
            H[i, j] = cs[i] * hi + sn[i] * hi1
            H[i + 1, j] = -sn[i] * hi + cs[i] * hi1
        denom = np.hypot(H[j, j], H[j + 1, j])
        cs[j], sn[j] = (1.0, 0.0) if denom == 0 else (H[j, j] / denom, H[j + 1, j] / denom)
        H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
        H[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]

        k = j + 1
        res = abs(g[j + 1])
        history.append(res)
        if hnext <= 1e-14 * norm_in:
            notes.append(f"happy breakdown at iteration {k}")
            converged = True
            break
        if res <= tol:
            converged = True
            break
        V[j + 1] = w / hnext

    y = _back_substitute(H[:k, :k], g[:k])
    x = x0 + M(V[:k].T @ y)
    return SolveReport(solution=x, iterations=k, residual_history=history,
                       converged=converged, wall_time=time.perf_counter() - t0, notes=notes)


def _back_substitute(R, g):
    y = np.zeros_like(g)
    for i in range(len(g) - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y


def write_history(report: SolveReport, path, stage=None, start_iter=0, append=False):
    """CSV with columns ``iter, residual[, infsup_estimate][, stage]``."""
    est = report.infsup_history
    header = ["iter", "residual"]
    if est is not None:
        header.append("infsup_estimate")
    if stage is not None:
        header.append("stage")
    with open(path, "a" if append else "w", newline="") as fh:
        out = csv.writer(fh)
        if not append:
            out.writerow(header)
        for i, r in enumerate(report.residual_history):
            row = [start_iter + i, repr(float(r))]
            if est is not None:
                e = est[i] if i < len(est) else None
                row.append("" if e is None else repr(float(e)))
            if stage is not None:
                row.append(stage)
            out.writerow(row)
