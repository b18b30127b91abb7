"""Argument parsing and dispatch for future-sde-solver."""

from __future__ import annotations

import dataclasses
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from future_sde_solver.models.config import RunConfig

VERBS = ("solve-mc", "solve-fd", "compare", "diagnose", "kpz")
USAGE = (
    "Usage: future-sde-solver {solve-mc|solve-fd|compare|diagnose|kpz} --config PATH "
    "[--seed N] [--out-dir PATH] [--particles N] [--gate PCT] [--dat] [--verbose]"
)
EXIT_USAGE = 2
EXIT_INTERNAL = 5

logger = logging.getLogger("future_sde_solver")


def _usage_error(message: str) -> None:
    print(message, file=sys.stderr)
    print(USAGE, file=sys.stderr)
    sys.exit(EXIT_USAGE)


def _number(flag: str, text: str, kind: type) -> int | float:
    try:
        value = kind(text)
    except ValueError:
        _usage_error(f"{flag} expects a number, got {text!r}")
    return value


def parse_args(argv: list[str] | None = None) -> dict:
    """Parse command-line arguments.

    Returns dict with keys: verb, config, seed, out_dir, particles, gate,
    dat, verbose, help, version.
    """
    if argv is None:
        argv = sys.argv[1:]

    result = {
        "verb": None,
        "config": None,
        "seed": None,
        "out_dir": None,
        "particles": None,
        "gate": None,
        "dat": False,
        "verbose": False,
        "help": False,
        "version": False,
    }

    def value(i: int) -> str:
        if i + 1 >= len(argv):
            _usage_error(f"{argv[i]} needs a value")
        return argv[i + 1]

    i = 0
    while i < len(argv):
        arg = argv[i]
        match arg:
            case "--config":
                result["config"] = Path(value(i))
                i += 1
            case "--seed":
                result["seed"] = _number(arg, value(i), int)
                i += 1
            case "--out-dir":
                result["out_dir"] = Path(value(i))
                i += 1
            case "--particles":
                result["particles"] = _number(arg, value(i), int)
                i += 1
            case "--gate":
                result["gate"] = _number(arg, value(i), float)
                i += 1
            case "--dat":
                result["dat"] = True
            case "--verbose" | "-v":
                result["verbose"] = True
            case "--help" | "-h":
                result["help"] = True
            case "--version" | "-V":
                result["version"] = True
            case _:
                if arg.startswith("-"):
                    _usage_error(f"Unknown flag: {arg}")
                if result["verb"] is not None:
                    _usage_error(f"Unexpected argument: {arg}")
                if arg not in VERBS:
                    _usage_error(f"Unknown verb: {arg}")
                result["verb"] = arg
        i += 1

    return result


def print_help() -> None:
    """Print usage help."""
    print("future-sde-solver - semilinear parabolic PDEs by future-dependent SDE Monte Carlo")
    print()
    print(USAGE)
    print()
    print("Verbs:")
    print("  solve-mc   Picard (or outer) Monte Carlo solve; writes u_mc.psif, diagnostics.csv")
    print("  solve-fd   Finite-difference oracle solve; writes u_fd.psif, fd_slices.csv")
    print("  compare    Both backends; writes error_table.csv, exits 1 if the gate fails")
    print("  diagnose   Hypothesis probes; writes assumptions.csv")
    print("  kpz        compare through the Cole-Hopf transform")
    print()
    print("Flags:")
    print("  --config PATH    Run configuration (required)")
    print("  --seed N         Override the configured seed")
    print("  --out-dir PATH   Override the output directory")
    print("  --particles N    Override particles per node")
    print("  --gate PCT       Override the compare gate, in percent")
    print("  --dat            Also write gnuplot .dat tables")
    print("  --verbose        Debug logging")
    print()
    print("Exit codes: 0 pass, 2 config/problem, 3 blow-up, 4 no convergence, 5 internal")
    print("            1 gate failed (extension: compare and kpz only, when a slice misses the gate)")


def setup_logging(verbose: bool) -> None:
    from rich.console import Console
    from rich.logging import RichHandler

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def apply_overrides(config: RunConfig, args: dict) -> RunConfig:
    """Flags win over the config file; replace() re-runs validation."""
    changes = {}
    if args["seed"] is not None:
        changes["seed"] = args["seed"]
    if args["out_dir"] is not None:
        changes["output_dir"] = args["out_dir"]
    if args["gate"] is not None:
        changes["gate"] = args["gate"] / 100.0
    if args["dat"]:
        changes["dat"] = True
    if args["particles"] is not None:
        changes["solver"] = dataclasses.replace(config.solver, particles=args["particles"])
    if not changes:
        return config
    return dataclasses.replace(config, **changes)


def main(argv: list[str] | None = None) -> None:
    """Main entry point."""
    args = parse_args(argv)

    if args["version"]:
        from future_sde_solver.__about__ import __version__
        print(f"future-sde-solver {__version__}")
        sys.exit(0)

    if args["help"]:
        print_help()
        sys.exit(0)

    if args["verb"] is None:
        _usage_error("Missing verb")
    if args["config"] is None:
        _usage_error("Missing --config PATH")

    setup_logging(args["verbose"])

    from future_sde_solver.models.errors import SolverError

    try:
        from future_sde_solver.models.config_file import load_config
        config = apply_overrides(load_config(args["config"]), args)

        match args["verb"]:
            case "solve-mc":
                from future_sde_solver.report import run_solve_mc
                code = run_solve_mc(config)
            case "solve-fd":
                from future_sde_solver.report import run_solve_fd
                code = run_solve_fd(config)
            case "compare":
                from future_sde_solver.report import run_compare
                code = run_compare(config)
            case "diagnose":
                from future_sde_solver.summary import run_diagnose
                code = run_diagnose(config)
            case "kpz":
                from future_sde_solver.report import run_kpz
                code = run_kpz(config)
    except SolverError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        sys.exit(exc.exit_code)
    except Exception:
        logger.exception("internal error")
        sys.exit(EXIT_INTERNAL)

    sys.exit(code)
