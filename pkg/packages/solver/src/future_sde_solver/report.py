"""solve-mc, solve-fd, compare and kpz runs: orchestration and the files they write.

Every run leaves ``manifest.txt`` in the output directory, on failure too.
The manifest's active lines are a loadable config; results and build
identifiers ride along as ``#`` comment lines.
"""

from __future__ import annotations

import contextlib
import logging
import math
import platform
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from future_sde_solver.__about__ import __version__
from future_sde_solver.models.catalog import build_problem
from future_sde_solver.models.config import RunConfig
from future_sde_solver.models.errors import BlowUpError, ConfigError, ConvergenceError, SolverError
from future_sde_solver.models.fd_oracle import FdSolution, fd_solve, problem_scale, residual_of
from future_sde_solver.models.feynman_kac import PsiField
from future_sde_solver.models.fixed_point import (
    BLOW_UP,
    CONVERGED,
    PicardState,
    fk_sup_bound_holds,
    outer_psi_solve,
    pde_view,
    picard_solve,
    valid_before,
)
from future_sde_solver.models.lattice import Lattice, TimeGrid
from future_sde_solver.models.persistence import atomic_write_text, format_cell, write_snapshot, write_table
from future_sde_solver.models.problem import AssumptionReport, ProblemSpec, k_constant, probe_assumptions
from future_sde_solver.models.rng import RngStream
from future_sde_solver.models.transforms import (
    KpzProblem,
    base_problem,
    build_direct_problem,
    build_transformed_problem,
    invert_solution,
)

logger = logging.getLogger(__name__)

EXIT_PASS = 0
EXIT_GATE = 1

ERROR_TABLE_HEADER = ("slice", "time", "sup_diff", "l2_diff", "max_stderr", "sup_fd", "rel_sup_diff")


# ---------------------------------------------------------------------------
# Problem resolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResolvedProblem:
    """What each backend solves. ``beta`` set means the MC field is a Cole-Hopf v."""

    mc_spec: ProblemSpec
    fd_spec: ProblemSpec
    beta: float | None = None
    kpz: bool = False


def resolve_problem(config: RunConfig) -> ResolvedProblem:
    problem = build_problem(config.problem, config.params, config.dim, config.tabulated)
    if not isinstance(problem, KpzProblem):
        return ResolvedProblem(problem, problem)
    if problem.beta == 0.0:
        base = base_problem(problem)
        return ResolvedProblem(base, base, None, kpz=True)
    return ResolvedProblem(
        build_transformed_problem(problem), build_direct_problem(problem), problem.beta, kpz=True,
    )


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _quote(value: str) -> str:
    if value == "" or value != value.strip() or "#" in value:
        return f'"{value}"'
    return value


def build_identifier() -> list[tuple[str, str]]:
    return [
        ("build.version", __version__),
        ("build.python", platform.python_version()),
        ("build.numpy", np.__version__),
        ("build.scipy", scipy.__version__),
    ]


@dataclass
class RunRecord:
    verb: str
    config: RunConfig
    status: str = "pass"
    results: list[tuple[str, str]] = field(default_factory=list)

    @property
    def directory(self) -> Path:
        return self.config.output_dir

    def add(self, key: str, value: object) -> None:
        self.results.append((key, format_cell(value)))

    def path(self, name: str) -> Path:
        return self.directory / name

    def render(self) -> str:
        lines = [f"# future-sde-solver {self.verb} run", f"# status = {self.status}"]
        lines += [f"# {key} = {value}" for key, value in build_identifier()]
        lines += [f"# {key} = {value}" for key, value in self.results]
        lines += [f"{key} = {_quote(value)}" for key, value in self.config.manifest_items()]
        return "\n".join(lines) + "\n"

    def write(self) -> Path:
        target = self.path("manifest.txt")
        atomic_write_text(target, self.render())
        return target


@contextlib.contextmanager
def recorded_run(verb: str, config: RunConfig) -> Iterator[RunRecord]:
    """Yield a record; the manifest is written on the way out, partial if the run raised."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(verb, config)
    try:
        yield record
    except BaseException as exc:
        record.status = "partial"
        record.add("error", f"{type(exc).__name__}: {exc}")
        record.add("exit_code", getattr(exc, "exit_code", 5))
        if isinstance(exc, BlowUpError) and exc.time is not None:
            record.add("blowup_time", exc.time)
        record.write()
        raise
    record.write()


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

def _probe(spec: ProblemSpec, config: RunConfig, lattice: Lattice, grid: TimeGrid) -> AssumptionReport | None:
    solver = config.solver
    if solver.override_assumptions:
        logger.warning("hypothesis probes overridden")
        return None
    report = probe_assumptions(
        spec, solver.kato_pair, solver.probe_budget, lattice, grid,
        box=solver.probe_box, alpha_threshold=solver.alpha_threshold,
    )
    write_table(config.output_dir / "assumptions.csv", ("name", "value"), report.rows(), dat=False)
    return report


def solve_mc(
    spec: ProblemSpec, config: RunConfig, lattice: Lattice, grid: TimeGrid, record: RunRecord
) -> tuple[PsiField, PicardState]:
    """Picard (spatial g) or outer (state-dependent g) solve; returns the engine-time field."""
    assumptions = _probe(spec, config, lattice, grid)
    rng = RngStream(config.seed)
    solver = picard_solve if spec.spatial_source else outer_psi_solve
    logger.info("solving %s by %s on %s nodes, %d steps", spec.name, solver.__name__, lattice.shape, grid.n_steps)
    psi, state = solver(spec, config.solver, rng, assumptions=assumptions, lattice=lattice, grid=grid)
    k = assumptions.k_constant if assumptions is not None else k_constant(spec, lattice, grid)
    record.add("mc.status", state.status)
    record.add("mc.iterations", state.iterate_index)
    if state.distance_history:
        record.add("mc.final_distance", state.distance_history[-1])
    record.add("mc.k_constant", k)
    record.add("mc.fk_path_violations", state.total_path_violations)
    record.add("mc.fk_bound_holds", fk_sup_bound_holds(state, k))
    if state.blowup_time is not None:
        record.add("blowup_time", state.blowup_time)
    return psi, state


def solve_fd(spec: ProblemSpec, config: RunConfig, lattice: Lattice, grid: TimeGrid, record: RunRecord) -> FdSolution:
    """FD solve on the refined lattice, restricted back onto (lattice, grid)."""
    r = config.fd_refine
    fine_lattice = Lattice.uniform(spec.dim_d, config.solver.nodes * r)
    fine_grid = TimeGrid(grid.horizon, grid.n_steps * r)
    fd = fd_solve(spec, fine_lattice, fine_grid, config.scheme, config.cfl)
    record.add("fd.scheme", fd.scheme)
    record.add("fd.cfl_max_stable", fd.cfl_report.max_stable)
    record.add("fd.cfl_used", fd.cfl_report.used)
    record.add("fd.substeps", fd.cfl_report.substeps)
    record.add("fd.residual", residual_of(fd.values, spec, fine_lattice, fine_grid))
    record.add("fd.problem_scale", problem_scale(spec, fine_lattice))
    return fd if r == 1 else fd.restrict(lattice, grid)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _state_rows(stage: str, state: PicardState, timings: bool) -> list[list[object]]:
    rows = []
    history, ratios = state.distance_history, state.contraction_ratios
    for i in range(state.iterate_index):
        row: list[object] = [
            stage,
            i,
            history[i - 1] if 1 <= i <= len(history) else None,
            ratios[i - 2] if 2 <= i <= len(ratios) + 1 else None,
            state.sup_norms[i],
            state.max_stderr[i],
        ]
        if timings:
            row.append(state.wall_times[i])
        rows.append(row)
    return rows


def diagnostics_table(state: PicardState, timings: bool = False) -> tuple[list[str], list[list[object]]]:
    """Picard history (and, for outer runs, every inner history) in run order."""
    header = ["stage", "iteration", "distance", "contraction_ratio", "sup_norm", "max_stderr"]
    if timings:
        header.append("wall_time")
    if not state.inner_states:
        return header, _state_rows("picard", state, timings)
    rows = []
    for p, inner in enumerate(state.inner_states, start=1):
        rows += _state_rows(f"inner-{p}", inner, timings)
    rows += _state_rows("outer", state, timings)
    return header, rows


def error_table(mc_u: PsiField, fd_u: FdSolution) -> list[list[object]]:
    """Per-slice differences between PDE-time fields on one layout."""
    if mc_u.values.shape != fd_u.values.shape:
        raise SolverError(f"MC field {mc_u.values.shape} and FD field {fd_u.values.shape} differ in layout")
    diff = np.linalg.norm(mc_u.values - fd_u.values, axis=-1)
    sup_fd = np.linalg.norm(fd_u.values, axis=-1).max(axis=1)
    scale = max(float(sup_fd.max()), np.finfo(float).tiny)
    volume = mc_u.lattice.cell_volume
    rows = []
    for k in range(mc_u.grid.n_slices):
        sup_diff = float(diff[k].max())
        rows.append([
            k,
            mc_u.grid.time(k),
            sup_diff,
            math.sqrt(float(np.sum(diff[k] ** 2)) * volume),
            float(mc_u.stderr[k].max()),
            float(sup_fd[k]),
            sup_diff / scale,
        ])
    return rows


def gate_passes(rows: list[list[object]], gate: float) -> bool:
    """Each slice within ``gate`` of the FD scale, or within 3 standard errors."""
    return all(row[6] <= gate or row[2] <= 3.0 * row[4] for row in rows)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def _layout(spec: ProblemSpec, config: RunConfig) -> tuple[Lattice, TimeGrid]:
    return config.solver.lattice(spec.dim_d), config.solver.time_grid(spec.horizon)


def _mc_outputs(
    resolved: ResolvedProblem, psi: PsiField, state: PicardState, record: RunRecord
) -> PsiField:
    """Write diagnostics and the PDE-time snapshot(s); a blown-up run keeps only ``t < T_n``."""
    config = record.config
    header, rows = diagnostics_table(state, config.timings)
    write_table(record.path("diagnostics.csv"), header, rows, dat=config.dat)
    u = pde_view(psi)
    written: PsiField | None = u
    if state.status == BLOW_UP and state.blowup_time is not None:
        written = valid_before(u, state.blowup_time)
        kept = 0 if written is None else written.grid.n_slices
        record.add("mc.valid_slices", kept)
        if written is None:
            logger.warning("no slices before t=%g; MC snapshot not written", state.blowup_time)
            return u
    if resolved.beta is not None:
        write_snapshot(written, record.path("v_mc.psif"))
        u = invert_solution(u, resolved.beta)
        written = invert_solution(written, resolved.beta)
    write_snapshot(written, record.path("u_mc.psif"))
    return u


def _status_code(state: PicardState, record: RunRecord) -> int | None:
    if state.status == BLOW_UP:
        record.status = "blow-up"
        return BlowUpError.exit_code
    if state.status != CONVERGED:
        record.status = "max-iterations"
        return ConvergenceError.exit_code
    return None


def run_solve_mc(config: RunConfig) -> int:
    with recorded_run("solve-mc", config) as record:
        resolved = resolve_problem(config)
        lattice, grid = _layout(resolved.mc_spec, config)
        psi, state = solve_mc(resolved.mc_spec, config, lattice, grid, record)
        _mc_outputs(resolved, psi, state, record)
        code = _status_code(state, record)
        return EXIT_PASS if code is None else code


def run_solve_fd(config: RunConfig) -> int:
    with recorded_run("solve-fd", config) as record:
        resolved = resolve_problem(config)
        lattice, grid = _layout(resolved.fd_spec, config)
        fd = solve_fd(resolved.fd_spec, config, lattice, grid, record)
        write_snapshot(fd, record.path("u_fd.psif"))
        norms = np.linalg.norm(fd.values, axis=-1)
        rows = [
            [k, grid.time(k), float(norms[k].max()), math.sqrt(float(np.sum(norms[k] ** 2)) * lattice.cell_volume)]
            for k in range(grid.n_slices)
        ]
        write_table(record.path("fd_slices.csv"), ("slice", "time", "sup_u", "l2_u"), rows, dat=config.dat)
        return EXIT_PASS


def _compare(config: RunConfig, verb: str) -> int:
    with recorded_run(verb, config) as record:
        resolved = resolve_problem(config)
        if verb == "kpz" and not resolved.kpz:
            raise ConfigError(f"kpz needs a kpz-type problem (kpz, navier-stokes), got {config.problem!r}")
        lattice, grid = _layout(resolved.mc_spec, config)
        psi, state = solve_mc(resolved.mc_spec, config, lattice, grid, record)
        u_mc = _mc_outputs(resolved, psi, state, record)
        if state.status == BLOW_UP:
            return _status_code(state, record)
        fd = solve_fd(resolved.fd_spec, config, lattice, grid, record)
        write_snapshot(fd, record.path("u_fd.psif"))
        rows = error_table(u_mc, fd)
        write_table(record.path("error_table.csv"), ERROR_TABLE_HEADER, rows, dat=config.dat)
        worst = max(row[6] for row in rows)
        passed = gate_passes(rows, config.gate)
        record.add("compare.max_rel_sup_diff", worst)
        record.add("compare.gate", config.gate)
        record.add("compare.pass", passed)
        logger.info("max relative sup difference %.3e (gate %.3g)", worst, config.gate)
        code = _status_code(state, record)
        if code is not None:
            return code
        if not passed:
            record.status = "gate-failed"
            return EXIT_GATE
        return EXIT_PASS


def run_compare(config: RunConfig) -> int:
    return _compare(config, "compare")


def run_kpz(config: RunConfig) -> int:
    """compare for quadratic-gradient problems: MC on the Cole-Hopf side, FD on the direct equation."""
    return _compare(config, "kpz")
