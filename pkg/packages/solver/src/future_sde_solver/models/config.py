"""SolverConfig and RunConfig dataclasses."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from future_sde_solver.models.errors import ConfigError
from future_sde_solver.models.lattice import Lattice, TimeGrid
from future_sde_solver.models.problem import KatoPair

GRADIENT_MODES = ("grid-difference", "bismut")
FD_SCHEMES = ("imex-euler", "explicit-rk4")


@dataclass
class SolverConfig:
    particles: int = 10000
    n_steps: int = 200
    nodes: int = 64
    picard_lambda: float | None = None  # None -> 4 / T
    tol: float = 1e-3
    max_iter: int = 25
    outer_max_iter: int = 15
    gradient_mode: str = "grid-difference"
    truncation_level: float | None = None
    alpha_threshold: float = 0.1
    probe_budget: int = 256
    probe_box: float = 10.0
    kato_p: float = 8.0
    kato_q: float = 8.0
    override_assumptions: bool = False
    workers: int = 1
    jacobian_step: float = 1e-4
    chunk_bytes: int = 64 * 1024 * 1024

    def __post_init__(self) -> None:
        for name in ("particles", "n_steps", "nodes", "max_iter", "outer_max_iter", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.tol > 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.picard_lambda is not None and self.picard_lambda < 0:
            raise ConfigError(f"picard lambda must be >= 0, got {self.picard_lambda}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(f"gradient_mode must be one of {', '.join(GRADIENT_MODES)}")
        if self.truncation_level is not None and self.truncation_level < 1:
            raise ConfigError(f"truncation_level must be >= 1, got {self.truncation_level}")
        if self.probe_budget < 100:
            raise ConfigError(f"probe_budget must be >= 100, got {self.probe_budget}")

    def lattice(self, dim: int) -> Lattice:
        return Lattice.uniform(dim, self.nodes)

    def time_grid(self, horizon: float) -> TimeGrid:
        return TimeGrid(horizon, self.n_steps)

    def lambda_for(self, horizon: float) -> float:
        return 4.0 / horizon if self.picard_lambda is None else self.picard_lambda

    @property
    def kato_pair(self) -> KatoPair:
        return KatoPair(self.kato_p, self.kato_q)


@dataclass
class RunConfig:
    seed: int
    problem: str = "heat"
    params: dict[str, float] = field(default_factory=dict)
    dim: int = 1
    tabulated: Path | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    scheme: str = "imex-euler"
    fd_refine: int = 1
    cfl: float = 0.4
    gate: float = 0.02
    output_dir: Path = Path("runs")
    timings: bool = False
    dat: bool = False
    source: Path | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in 64 bits, got {self.seed}")
        if self.scheme not in FD_SCHEMES:
            raise ConfigError(f"scheme must be one of {', '.join(FD_SCHEMES)}")
        if self.fd_refine < 1:
            raise ConfigError(f"fd_refine must be >= 1, got {self.fd_refine}")
        if not 0 < self.cfl <= 1:
            raise ConfigError(f"cfl must be in (0, 1], got {self.cfl}")
        if not self.gate > 0:
            raise ConfigError(f"gate must be > 0, got {self.gate}")
        if not 1 <= self.dim <= 3:
            raise ConfigError(f"dim must be 1-3, got {self.dim}")

    def manifest_items(self) -> list[tuple[str, str]]:
        """Every effective setting as (dotted key, value) in a stable order."""
        s = self.solver
        items = [
            ("seed", str(self.seed)),
            ("problem", self.problem),
            ("dim", str(self.dim)),
            ("tabulated", str(self.tabulated) if self.tabulated else ""),
            ("particles", str(s.particles)),
            ("gradient_mode", s.gradient_mode),
            ("truncation_level", "" if s.truncation_level is None else repr(s.truncation_level)),
            ("alpha_threshold", repr(s.alpha_threshold)),
            ("workers", str(s.workers)),
            ("output_dir", str(self.output_dir)),
            ("gate", repr(self.gate)),
            ("timings", str(self.timings).lower()),
            ("dat", str(self.dat).lower()),
            ("lattice.nodes", str(s.nodes)),
            ("lattice.n_steps", str(s.n_steps)),
            ("picard.lambda", "" if s.picard_lambda is None else repr(s.picard_lambda)),
            ("picard.tol", repr(s.tol)),
            ("picard.max_iter", str(s.max_iter)),
            ("picard.outer_max_iter", str(s.outer_max_iter)),
            ("probe.budget", str(s.probe_budget)),
            ("probe.box", repr(s.probe_box)),
            ("probe.kato_p", repr(s.kato_p)),
            ("probe.kato_q", repr(s.kato_q)),
            ("probe.override", str(s.override_assumptions).lower()),
            ("sde.jacobian_step", repr(s.jacobian_step)),
            ("sde.chunk_bytes", str(s.chunk_bytes)),
            ("fd.scheme", self.scheme),
            ("fd.refine", str(self.fd_refine)),
            ("fd.cfl", repr(self.cfl)),
        ]
        items += [(f"params.{name}", repr(value)) for name, value in sorted(self.params.items())]
        return items
