"""diagnose output: hypothesis probe constants and pass flags."""

from __future__ import annotations

from rich.console import Console
from rich.table import Table

from future_sde_solver.models.config import RunConfig
from future_sde_solver.models.errors import AssumptionError
from future_sde_solver.models.persistence import write_table
from future_sde_solver.models.problem import AssumptionReport, kato_class_check, probe_assumptions
from future_sde_solver.report import EXIT_PASS, recorded_run, resolve_problem


def probe_table(report: AssumptionReport, title: str) -> Table:
    table = Table(title=title, show_lines=False)
    table.add_column("constant")
    table.add_column("value", justify="right")
    for name, value in report.rows():
        if name.startswith("pass[") or name == "failure":
            continue
        table.add_row(name, value)
    return table


def flag_table(report: AssumptionReport) -> Table:
    table = Table(title="hypotheses")
    table.add_column("flag")
    table.add_column("result")
    for name, ok in sorted(report.pass_flags.items()):
        table.add_row(name, "[green]pass[/green]" if ok else "[red]fail[/red]")
    return table


def run_diagnose(config: RunConfig, console: Console | None = None) -> int:
    """Probe the configured problem; exit 2 when any flag fails."""
    console = console or Console()
    with recorded_run("diagnose", config) as record:
        resolved = resolve_problem(config)
        spec = resolved.mc_spec
        solver = config.solver
        lattice, grid = solver.lattice(spec.dim_d), solver.time_grid(spec.horizon)
        report = probe_assumptions(
            spec, solver.kato_pair, solver.probe_budget, lattice, grid,
            box=solver.probe_box, alpha_threshold=solver.alpha_threshold,
        )
        write_table(record.path("assumptions.csv"), ("name", "value"), report.rows(), dat=config.dat)

        pair = solver.kato_pair
        console.print(f"[bold]{spec.name}[/bold]  d={spec.dim_d} m={spec.dim_m} T={spec.horizon:g}")
        console.print(
            f"Kato pair (p={pair.p:g}, q={pair.q:g}): "
            f"{'admissible' if kato_class_check(spec.dim_d, pair) else 'not admissible'} in d={spec.dim_d}"
        )
        console.print(probe_table(report, f"probe constants ({solver.probe_budget} samples)"))
        console.print(flag_table(report))
        if report.failure:
            console.print(f"[yellow]first failure:[/yellow] {report.failure}")

        record.add("diagnose.failing", ",".join(report.failing))
        if report.failing:
            record.status = "assumptions-failed"
            return AssumptionError.exit_code
        return EXIT_PASS
