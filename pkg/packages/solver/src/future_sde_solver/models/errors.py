"""Exception hierarchy shared by the solvers, the oracle and the CLI.

Every error carries the process exit code the CLI reports for it.
"""

from __future__ import annotations


class SolverError(Exception):
    """Base class for all solver failures."""

    exit_code = 5


class ConfigError(SolverError, ValueError):
    """Raised when a run configuration cannot be parsed or validated."""

    exit_code = 2

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProblemError(SolverError, ValueError):
    """Raised when problem data violates a structural precondition."""

    exit_code = 2


class LatticeError(ProblemError):
    """Raised when a lattice is too coarse for the requested stencil."""


class AssumptionError(ProblemError):
    """Raised when a hypothesis probe fails and no override was given."""


class BlowUpError(SolverError, RuntimeError):
    """Raised when a trajectory or a field leaves the finite range."""

    exit_code = 3

    def __init__(self, message: str, time: float | None = None, location: object = None) -> None:
        self.time = time
        self.location = location
        super().__init__(message)


class InstabilityError(BlowUpError):
    """Raised when the finite-difference oracle detects norm growth."""


class ConvergenceError(SolverError, RuntimeError):
    """Raised when a fixed-point iteration exhausts its iteration budget."""

    exit_code = 4


class FieldMismatchError(SolverError, ValueError):
    """Raised when two fields live on different lattices or time grids."""


class SnapshotError(SolverError, ValueError):
    """Raised when a PSIF snapshot cannot be read back."""


class PositivityError(SolverError, ValueError):
    """Raised when a Cole-Hopf field loses positivity."""

    def __init__(self, message: str, location: tuple[int, int] | None = None) -> None:
        self.location = location
        super().__init__(message)
