"""Problem drivers: Stokes solves, Picard iteration to the benchmark Oseen
system, Oseen preconditioner construction and divergence diagnostics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import (DofMap, PcdOperators, SaddleSystem, assemble_oseen, assemble_pcd,
                       assemble_pressure_mass, assemble_stokes, element_divergence,
                       pressure_nullspace)
from .krylov import SolveReport, gmres, minres
from .linalg import factorize
from .mesh import Mesh, build_cavity_mesh, build_step_mesh
from . import precond

log = logging.getLogger(__name__)

ELEMENT_PAIRS = {
    "P2P1": ("triangle", "TH"),
    "P2P1star": ("triangle", "enriched"),
    "Q2Q1": ("quad", "TH"),
    "Q2Q1star": ("quad", "enriched"),
}
PROBLEMS = ("cavity2d", "step")
DEFAULT_NU = {"cavity2d": 1.0 / 100.0, "step": 1.0 / 50.0}


@dataclass(frozen=True)
class FlowProblem:
    problem: str = "cavity2d"
    elements: str = "P2P1star"
    level: int = 4
    nu: float | None = None
    diagonal: str = "alternating"

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}; expected one of {PROBLEMS}")
        if self.elements not in ELEMENT_PAIRS:
            raise ValueError(f"unknown element pair {self.elements!r}; "
                             f"expected one of {tuple(ELEMENT_PAIRS)}")
        if self.level < 1:
            raise ValueError("grid level must be >= 1")
        if self.nu is not None and not self.nu > 0:
            raise ValueError("viscosity must be positive")

    @property
    def viscosity(self) -> float:
        return DEFAULT_NU[self.problem] if self.nu is None else float(self.nu)

    @property
    def kind(self) -> str:
        return ELEMENT_PAIRS[self.elements][0]

    @property
    def space(self) -> str:
        return ELEMENT_PAIRS[self.elements][1]

    @property
    def enclosed(self) -> bool:
        return self.problem == "cavity2d"

    def mesh(self) -> Mesh:
        if self.problem == "cavity2d":
            return build_cavity_mesh(self.level, self.kind, self.diagonal)
        return build_step_mesh(self.level, self.kind, self.diagonal)


@dataclass
class StokesSolution:
    problem: FlowProblem
    mesh: Mesh
    dofmap: DofMap
    system: SaddleSystem
    M_Q: sp.csr_matrix
    velocity: np.ndarray  # full nodal velocity, x components then y components
    pressure: np.ndarray
    report: SolveReport | None = None


def stokes_preconditioner(system, M_Q, pre="p1", **opts):
    if pre == "p1":
        return precond.stokes_p1(system, M_Q)
    if pre == "p2":
        return precond.stokes_p2(system, M_Q, **opts)
    raise ValueError(f"unknown Stokes preconditioner {pre!r}")


def solve_stokes(problem: FlowProblem, pre="p1", rtol=1e-8, maxit=500) -> StokesSolution:
    """Unit-viscosity Stokes flow by preconditioned MINRES."""
    mesh = problem.mesh()
    system, dm = assemble_stokes(mesh, problem.space, problem.problem)
    M_Q = assemble_pressure_mass(mesh, problem.space).M_Q
    P = stokes_preconditioner(system, M_Q, pre)
    report = minres(system.matvec, system.rhs, P, rtol=rtol, maxit=maxit)
    if getattr(P, "warnings", 0):
        report.notes.append(f"{P.warnings} pressure residuals drifted off the nullspace complement")
    x = report.solution
    return StokesSolution(problem, mesh, dm, system, M_Q,
                          dm.full_velocity(x[:system.n_u]), x[system.n_u:], report)


def direct_solve(system: SaddleSystem, null: np.ndarray) -> np.ndarray:
    """Solve a (possibly singular) consistent saddle system by sparse LU.

    ``null`` holds pressure vectors spanning ``null(B^T)``.  One pressure
    dof per null vector is pinned to zero (a dense bordering row would
    wreck the fill-reducing ordering), then the pressure is projected to be
    Euclidean-orthogonal to ``null``.
    """
    K = system.matrix().tocsc()
    n = system.n_u + system.n_p
    m = null.shape[1]
    keep = np.arange(n)
    if m:
        _, _, piv = sla.qr(null.T, pivoting=True, mode="economic")
        pinned = system.n_u + np.sort(piv[:m])
        keep = np.setdiff1d(keep, pinned)
        K = K[keep][:, keep]
    x = np.zeros(n)
    x[keep] = factorize(K).solve(system.rhs[keep])
    if m:
        p = x[system.n_u:]
        x[system.n_u:] = p - null @ np.linalg.lstsq(null, p, rcond=None)[0]
    return x


@dataclass
class OseenBenchmark:
    """The linearized system after a number of Picard steps, with its setting."""

    problem: FlowProblem
    mesh: Mesh
    dofmap: DofMap
    system: SaddleSystem
    wind: np.ndarray  # full velocity defining the convection term
    x0: np.ndarray  # previous Picard iterate (free velocity, pressure)
    null: np.ndarray  # pressure nullspace basis of the system
    M_Q: sp.csr_matrix
    history: list = field(default_factory=list)  # per step: (B0 residual, update norm)

    @property
    def nu(self) -> float:
        return self.problem.viscosity


def picard_oseen(problem: FlowProblem, steps: int = 5) -> OseenBenchmark:
    """Run Picard iteration from the Stokes solution and return the system of step ``steps``.

    Steps ``1 .. steps-1`` are solved directly; the returned system is
    assembled with the velocity from step ``steps-1`` (the Stokes velocity
    when ``steps == 1``), which is also the returned initial guess.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    nu = problem.viscosity
    mesh = problem.mesh()
    stokes, dm = assemble_stokes(mesh, problem.space, problem.problem)
    null = pressure_nullspace(dm, problem.enclosed)
    # Stokes with viscosity nu: the velocity is independent of nu
    stokes = SaddleSystem(nu * stokes.A, stokes.B1, stokes.B0, nu * stokes.f, stokes.g)
    x = direct_solve(stokes, null)
    history = [_step_record(stokes, x, None)]
    for _ in range(steps - 1):
        w = dm.full_velocity(x[:stokes.n_u])
        system = assemble_oseen(mesh, problem.space, w, nu, dofmap=dm)
        x_new = direct_solve(system, null)
        history.append(_step_record(system, x_new, x))
        x = x_new
    w = dm.full_velocity(x[:stokes.n_u])
    system = assemble_oseen(mesh, problem.space, w, nu, dofmap=dm)
    M_Q = assemble_pressure_mass(mesh, problem.space).M_Q
    return OseenBenchmark(problem, mesh, dm, system, w, x, null, M_Q, history)


def _step_record(system, x, x_old):
    u = x[:system.n_u]
    b0 = float(np.linalg.norm(system.g[system.n_k:] - system.B0 @ u)) if system.n_0 else 0.0
    change = None if x_old is None else float(np.linalg.norm(u - x_old[:system.n_u]))
    return (b0, change)


def oseen_preconditioner(bench: OseenBenchmark, pre: str, lsc_scaling=None, pcd_order="mass-first",
                         pcd_inflow="robin"):
    system = bench.system
    F_lu = factorize(system.A)
    if pre == "m1":
        return precond.oseen_m1(system, bench.M_Q, bench.nu, F_lu=F_lu)
    if pre == "m2":
        ops = assemble_pcd(bench.mesh, bench.dofmap, bench.wind, bench.nu, pcd_inflow)
        return precond.oseen_m2(system, ops, bench.null, F_lu=F_lu, order=pcd_order)
    if pre == "m3":
        ops = assemble_pcd(bench.mesh, bench.dofmap, bench.wind, bench.nu)
        return precond.oseen_m3(system, ops.Mdiag, bench.null, F_lu=F_lu, D=lsc_scaling)
    raise ValueError(f"unknown Oseen preconditioner {pre!r}")


def solve_oseen(bench: OseenBenchmark, pre="m1", rtol=1e-6, atol=None, maxit=200,
                zero_guess=False, **opts) -> SolveReport:
    """GMRES on the benchmark system from the previous Picard iterate."""
    M = oseen_preconditioner(bench, pre, **opts)
    x0 = None if zero_guess else bench.x0
    return gmres(bench.system.matvec, bench.system.rhs, M, rtol=rtol, atol=atol,
                 maxit=maxit, x0=x0)


def solve_two_stage(bench: OseenBenchmark, eta=1e-4, c=10.0, maxit=400, absolute_eta=False,
                    pcd_order="mass-first", pcd_inflow="robin") -> precond.TwoStageResult:
    ops = assemble_pcd(bench.mesh, bench.dofmap, bench.wind, bench.nu, pcd_inflow)
    return precond.two_stage_solve(bench.system, bench.M_Q, ops, bench.nu, eta=eta, c=c,
                                   enclosed=bench.problem.enclosed, maxit=maxit,
                                   absolute_eta=absolute_eta, order=pcd_order)


# -- diagnostics ----------------------------------------------------------------

@dataclass
class DivergenceDiagnostics:
    l2: np.ndarray  # ||div u||_{L2(T)} per element
    mean: np.ndarray  # int_T div u per element
    centroids: np.ndarray

    @property
    def total(self) -> float:
        """Global ``||div u||_{L2}``."""
        return float(np.sqrt(np.sum(self.l2**2)))

    @property
    def max_mean(self) -> float:
        return float(np.abs(self.mean).max())


def divergence_report(velocity: np.ndarray, mesh: Mesh, dofmap: DofMap) -> DivergenceDiagnostics:
    mean, l2 = element_divergence(mesh, dofmap, velocity)
    return DivergenceDiagnostics(l2=l2, mean=mean, centroids=mesh.centroids())


def write_divergence_csv(diag: DivergenceDiagnostics, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["element", "x", "y", "div_l2", "div_mean"])
        for e, ((x, y), l2, mean) in enumerate(zip(diag.centroids.tolist(), diag.l2.tolist(),
                                                   diag.mean.tolist())):
            out.writerow([e, repr(x), repr(y), repr(l2), repr(mean)])


def write_nodal_csv(path, coords, **fields) -> None:
    """One row per point: ``x, y`` and one column per named field."""
    names = list(fields)
    cols = [np.asarray(fields[n], dtype=float) for n in names]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "y", *names])
        for i, (x, y) in enumerate(np.asarray(coords).tolist()):
            out.writerow([repr(x), repr(y), *(repr(float(c[i])) for c in cols)])


def export_solution(out_dir, mesh: Mesh, dofmap: DofMap, velocity, pressure) -> list:
    """Write velocity, vertex pressure and (enriched) centroid pressure CSVs."""
    from pathlib import Path

    out = Path(out_dir)
    n = dofmap.n_nodes
    paths = [out / "velocity.csv", out / "pressure_vertex.csv"]
    write_nodal_csv(paths[0], dofmap.node_coords, ux=velocity[:n], uy=velocity[n:])
    write_nodal_csv(paths[1], mesh.vertices, p=pressure[:dofmap.n_k])
    if dofmap.n_0:
        paths.append(out / "pressure_centroid.csv")
        write_nodal_csv(paths[2], mesh.centroids(), p0=pressure[dofmap.n_k:])
    return paths
