"""Iterative solvers for Stokes and Oseen systems discretized with
Taylor-Hood and enriched (two-field pressure) Taylor-Hood elements."""

from .assembly import (DofMap, PcdOperators, PressureMassBlocks, SaddleSystem, assemble_oseen,
                       assemble_pcd, assemble_pressure_mass, assemble_stokes, build_dofmap)
from .flow import FlowProblem, divergence_report, picard_oseen, solve_stokes
from .infsup import est_minres, oracle_infsup
from .krylov import SolveReport, gmres, minres
from .mesh import Mesh, build_cavity_mesh, build_step_mesh

__version__ = "0.1.0"

__all__ = [
    "DofMap", "FlowProblem", "Mesh", "PcdOperators", "PressureMassBlocks", "SaddleSystem",
    "SolveReport", "assemble_oseen", "assemble_pcd", "assemble_pressure_mass", "assemble_stokes",
    "build_cavity_mesh", "build_dofmap", "build_step_mesh", "divergence_report", "est_minres",
    "gmres", "minres", "oracle_infsup", "picard_oseen", "solve_stokes",
]
