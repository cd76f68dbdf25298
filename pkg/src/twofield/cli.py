"""Command-line harness: inf-sup tables for Stokes flow and convergence
histories for the benchmark Oseen systems.

Every run writes plain CSV files with a one-line header into ``--out``.
Wall-clock timings go to ``timings.csv`` so that data files are
byte-identical between runs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .flow import (ELEMENT_PAIRS, FlowProblem, divergence_report, export_solution, picard_oseen,
                   solve_oseen, solve_stokes, solve_two_stage, write_divergence_csv)
from .infsup import attach_estimates
from .krylov import IndefinitePreconditionerError, write_history
from .linalg import FactorizationError, write_triplets
from .mesh import DIAGONALS

log = logging.getLogger("twofield")

COMMANDS = ("stokes-cavity", "oseen-step", "oseen-cavity", "infsup-sweep")
STOKES_PRE = ("p1", "p2")
OSEEN_PRE = ("m1", "m2", "m3", "two-stage")
EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    grid: list = field(default_factory=list)
    elements: list = field(default_factory=list)
    pre: str = ""
    rtol: float | None = None
    atol: float | None = None
    eta: float = 1e-4
    c: float = 10.0
    nu: float | None = None
    maxit: int | None = None
    out: Path = Path("results")
    est_infsup: bool = False
    export_matrices: bool = False
    export_solution: bool = False
    absolute_eta: bool = False
    pcd_order: str = "mass-first"
    pcd_inflow: str = "robin"
    diagonal: str = "alternating"
    steps: int = 5

    @property
    def problem(self) -> str:
        return {"oseen-step": "step"}.get(self.command, "cavity2d")

    @property
    def is_stokes(self) -> bool:
        return self.command in ("stokes-cavity", "infsup-sweep")


def parse_levels(text) -> list:
    """``"4,5,6"``, ``"4-6"`` or ``""`` (no levels)."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    if not text:
        return []
    levels = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            levels.extend(range(lo, hi + 1))
        else:
            levels.append(int(part))
    return levels


def read_config_file(path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twofield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        # None marks "not given", so config-file values can fill in
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        p.add_argument("--config", help="key = value file; command-line flags take precedence")
        p.add_argument("--problem", help="must match the command if given")
        p.add_argument("--grid", help="levels, e.g. 4,5,6 or 4-6")
        p.add_argument("--elements", help="comma-separated element pairs: "
                       + ", ".join(ELEMENT_PAIRS))
        p.add_argument("--pre", help="preconditioner id")
        p.add_argument("--rtol", type=float)
        p.add_argument("--atol", type=float, help="absolute residual target (Oseen runs)")
        p.add_argument("--eta", type=float)
        p.add_argument("--c", type=float)
        p.add_argument("--nu", type=float)
        p.add_argument("--maxit", type=int)
        p.add_argument("--out")
        p.add_argument("--est-infsup", action="store_const", const=True)
        p.add_argument("--export-matrices", action="store_const", const=True)
        p.add_argument("--export-solution", action="store_const", const=True)
        p.add_argument("--absolute-eta", action="store_const", const=True)
        p.add_argument("--pcd-order", choices=("mass-first", "coupling-first"))
        p.add_argument("--pcd-inflow", choices=("robin", "none"))
        p.add_argument("--diagonal", choices=DIAGONALS)
        p.add_argument("--steps", type=int)
    return parser


_DEFAULTS = {
    "stokes-cavity": dict(grid="4", elements="P2P1star", pre="p1", rtol=1e-8, maxit=500),
    "infsup-sweep": dict(grid="4-6", elements="P2P1,P2P1star", pre="p1", rtol=1e-8, maxit=500,
                         est_infsup=True),
    "oseen-step": dict(grid="4", elements="P2P1star", pre="m1", rtol=1e-6, maxit=400),
    "oseen-cavity": dict(grid="4", elements="P2P1star", pre="m1", rtol=1e-6, maxit=400),
}
_BOOL = {"est_infsup", "export_matrices", "export_solution", "absolute_eta"}
_FLOAT = {"rtol", "atol", "eta", "c", "nu"}
_INT = {"maxit", "steps"}


def _coerce(key, value):
    if not isinstance(value, str):
        return value
    try:
        if key in _BOOL:
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if key in _FLOAT:
            return float(value)
        if key in _INT:
            return int(value)
    except ValueError:
        raise UsageError(f"invalid value for {key}: {value!r}") from None
    return value


def make_config(args: argparse.Namespace) -> RunConfig:
    merged = dict(_DEFAULTS[args.command])
    if args.config:
        try:
            file_values = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        allowed = {f.name for f in fields(RunConfig)} | {"problem"}
        unknown = sorted(set(file_values) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        if file_values.get("command", args.command) != args.command:
            raise UsageError("config file command does not match the invoked command")
        file_values.pop("command", None)
        merged.update({k: _coerce(k, v) for k, v in file_values.items()})
    cli = {k: v for k, v in vars(args).items()
           if v is not None and k not in ("command", "config", "verbose")}
    merged.update(cli)

    problem = merged.pop("problem", None)
    cfg = RunConfig(command=args.command)
    for key, value in merged.items():
        setattr(cfg, key, value)
    try:
        cfg.grid = parse_levels(cfg.grid)
    except ValueError:
        raise UsageError(f"invalid grid specification {merged.get('grid')!r}") from None
    if isinstance(cfg.elements, str):
        cfg.elements = [e.strip() for e in cfg.elements.split(",") if e.strip()]
    cfg.out = Path(cfg.out)
    validate(cfg, problem)
    return cfg


def validate(cfg: RunConfig, problem=None) -> None:
    if problem is not None and {"cavity": "cavity2d"}.get(problem, problem) != cfg.problem:
        raise UsageError(f"--problem {problem} does not match command {cfg.command}")
    if any(level < 1 for level in cfg.grid):
        raise UsageError("grid levels must be >= 1")
    bad = [e for e in cfg.elements if e not in ELEMENT_PAIRS]
    if bad or not cfg.elements:
        raise UsageError(f"unknown element pair(s) {bad or cfg.elements}; "
                         f"expected {', '.join(ELEMENT_PAIRS)}")
    allowed = STOKES_PRE if cfg.is_stokes else OSEEN_PRE
    if cfg.pre not in allowed:
        raise UsageError(f"preconditioner {cfg.pre!r} not valid for {cfg.command}; "
                         f"expected one of {', '.join(allowed)}")
    if cfg.pre == "two-stage" and any(ELEMENT_PAIRS[e][1] != "enriched" for e in cfg.elements):
        raise UsageError("two-stage requires an enriched element pair")
    for name in ("rtol", "eta", "c"):
        value = getattr(cfg, name)
        if value is None or not value > 0:
            raise UsageError(f"{name} must be positive")
    if cfg.atol is not None and not cfg.atol > 0:
        raise UsageError("atol must be positive")
    if cfg.nu is not None and not cfg.nu > 0:
        raise UsageError("nu must be positive")
    if cfg.maxit is None or cfg.maxit < 0:
        raise UsageError("maxit must be >= 0")
    if cfg.steps < 1:
        raise UsageError("steps must be >= 1")
    if cfg.diagonal not in DIAGONALS:
        raise UsageError(f"unknown diagonal pattern {cfg.diagonal!r}")


# -- runs -------------------------------------------------------------------------

class _Timings:
    def __init__(self):
        self.rows = []

    def add(self, label, seconds):
        self.rows.append((label, seconds))

    def write(self, out_dir):
        with open(Path(out_dir) / "timings.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "seconds"])
            w.writerows((label, f"{s:.3f}") for label, s in self.rows)


def _fmt(x):
    return "" if x is None else repr(float(x))


def run_table(cfg: RunConfig, timings: _Timings) -> bool:
    """Stokes sweep: one row per (level, element pair)."""
    all_ok = True
    rows = []
    for level in cfg.grid:
        for elements in cfg.elements:
            t0 = time.perf_counter()
            problem = FlowProblem("cavity2d", elements, level, diagonal=cfg.diagonal)
            sol = solve_stokes(problem, pre=cfg.pre, rtol=cfg.rtol, maxit=cfg.maxit)
            rep = sol.report
            est = attach_estimates(rep) if cfg.est_infsup else None
            gamma2 = est.final if est is not None else None
            dm = sol.dofmap
            rows.append([level, elements, dm.n_u, dm.n_p, rep.iterations, _fmt(gamma2)])
            tag = f"L{level}_{elements}_{cfg.pre}"
            write_history(rep, cfg.out / f"convergence_{tag}.csv")
            if cfg.export_matrices:
                _export_matrices(cfg.out / f"matrices_{tag}", sol.system, sol.M_Q)
            if cfg.export_solution:
                d = cfg.out / f"solution_{tag}"
                d.mkdir(parents=True, exist_ok=True)
                export_solution(d, sol.mesh, dm, sol.velocity, sol.pressure)
                write_divergence_csv(divergence_report(sol.velocity, sol.mesh, dm),
                                     d / "divergence.csv")
            timings.add(tag, time.perf_counter() - t0)
            log.info("%s: %d iterations, gamma^2 = %s", tag, rep.iterations, gamma2)
            if not rep.converged and cfg.maxit > 0:
                log.error("%s: MINRES did not converge in %d iterations", tag, cfg.maxit)
                all_ok = False
    with open(cfg.out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grid", "elements", "velocity_dof", "pressure_dof", "iterations", "gamma2"])
        w.writerows(rows)
    return all_ok


def run_convergence(cfg: RunConfig, timings: _Timings) -> bool:
    """Oseen benchmark: residual history per (level, element pair)."""
    all_ok = True
    rows = []
    for level in cfg.grid:
        for elements in cfg.elements:
            t0 = time.perf_counter()
            problem = FlowProblem(cfg.problem, elements, level, nu=cfg.nu, diagonal=cfg.diagonal)
            bench = picard_oseen(problem, steps=cfg.steps)
            tag = f"L{level}_{elements}_{cfg.pre}"
            path = cfg.out / f"convergence_{tag}.csv"
            dm = bench.dofmap
            if cfg.pre == "two-stage":
                res = solve_two_stage(bench, eta=cfg.eta, c=cfg.c, maxit=cfg.maxit,
                                      absolute_eta=cfg.absolute_eta, pcd_order=cfg.pcd_order,
                                      pcd_inflow=cfg.pcd_inflow)
                write_history(res.stage1, path, stage=1)
                stage2 = res.stage2
                stage2.residual_history = [res.transition_residual] + stage2.residual_history[1:]
                write_history(stage2, path, stage=2, start_iter=res.stage1.iterations,
                              append=True)
                its = res.stage1.iterations + stage2.iterations
                ok = stage2.converged
                first, last = res.stage1.residual_history[0], stage2.final_residual
                extra = [res.stage1.iterations, stage2.iterations, _fmt(res.transition_residual),
                         _fmt(res.bound)]
                solution = stage2.solution
            else:
                rep = solve_oseen(bench, cfg.pre, rtol=cfg.rtol, atol=cfg.atol, maxit=cfg.maxit,
                                  pcd_order=cfg.pcd_order, pcd_inflow=cfg.pcd_inflow)
                write_history(rep, path)
                its, ok = rep.iterations, rep.converged
                first, last = rep.residual_history[0], rep.final_residual
                extra = ["", "", "", ""]
                solution = rep.solution
            rows.append([level, elements, dm.n_u, dm.n_p, cfg.pre, its, _fmt(first), _fmt(last),
                         *extra])
            if cfg.export_matrices:
                _export_matrices(cfg.out / f"matrices_{tag}", bench.system, bench.M_Q)
            if cfg.export_solution:
                d = cfg.out / f"solution_{tag}"
                d.mkdir(parents=True, exist_ok=True)
                u = dm.full_velocity(solution[:bench.system.n_u])
                export_solution(d, bench.mesh, dm, u, solution[bench.system.n_u:])
                write_divergence_csv(divergence_report(u, bench.mesh, dm), d / "divergence.csv")
            timings.add(tag, time.perf_counter() - t0)
            log.info("%s: %d iterations, residual %.3e -> %.3e", tag, its, first, last)
            if not ok and cfg.maxit > 0:
                log.error("%s: GMRES did not reach the tolerance in %d iterations", tag, cfg.maxit)
                all_ok = False
    with open(cfg.out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grid", "elements", "velocity_dof", "pressure_dof", "pre", "iterations",
                    "initial_residual", "final_residual", "stage1_iterations",
                    "stage2_iterations", "transition_residual", "transition_bound"])
        w.writerows(rows)
    return all_ok


def _export_matrices(directory: Path, system, M_Q):
    directory.mkdir(parents=True, exist_ok=True)
    write_triplets(system.A, directory / "A.txt")
    write_triplets(system.B1, directory / "B1.txt")
    write_triplets(system.B0, directory / "B0.txt")
    write_triplets(M_Q, directory / "MQ.txt")
    np.savetxt(directory / "rhs.txt", system.rhs, fmt="%r")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = make_config(args)
    except UsageError as exc:
        print(f"twofield: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg.out.mkdir(parents=True, exist_ok=True)
    timings = _Timings()
    try:
        ok = run_table(cfg, timings) if cfg.is_stokes else run_convergence(cfg, timings)
    except (FactorizationError, IndefinitePreconditionerError, RuntimeError,
            np.linalg.LinAlgError) as exc:
        print(f"twofield: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    finally:
        timings.write(cfg.out)
    return EXIT_OK if ok else EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
