"""Picard iteration on psi-fields, the outer source iteration, truncation and blow-up time.

Fields handed around here are indexed by engine time ``s``; the PDE solution
is read back through ``pde_view`` (``u_t = psi_{T-t}``), which is the only
place that reversal is applied.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from future_sde_solver.models.config import SolverConfig
from future_sde_solver.models.errors import AssumptionError, BlowUpError, FieldMismatchError, ProblemError
from future_sde_solver.models.feynman_kac import PsiField, estimate_psi_field
from future_sde_solver.models.lattice import Lattice, TimeGrid, interpolate, periodic_gradient, periodic_hessian
from future_sde_solver.models.problem import (
    HEADROOM,
    AssumptionReport,
    ProblemSpec,
    cb1_norm,
    k_constant,
    probe_assumptions,
)
from future_sde_solver.models.rng import RngStream
from future_sde_solver.models.sde_engine import DriftField

logger = logging.getLogger(__name__)

RUNNING = "running"
CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
BLOW_UP = "blow-up"
_FINAL = (CONVERGED, BLOW_UP)


@dataclass
class PicardState:
    lambda_weight: float
    psi: PsiField | None = None
    iterate_index: int = 0
    distance_history: list[float] = field(default_factory=list)
    contraction_ratios: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    sup_norms: list[float] = field(default_factory=list)
    max_stderr: list[float] = field(default_factory=list)
    path_violations: list[int] = field(default_factory=list)
    status: str = RUNNING
    blowup_time: float | None = None
    inner_states: list[PicardState] = field(default_factory=list)

    def record(self, psi: PsiField, distance: float | None, wall_time: float) -> None:
        self.iterate_index += 1
        self.psi = psi
        self.wall_times.append(wall_time)
        self.sup_norms.append(float(np.linalg.norm(psi.values, axis=-1).max()))
        self.max_stderr.append(float(psi.stderr.max()))
        self.path_violations.append(psi.path_violations)
        if distance is None:
            return
        if distance < 0:
            raise ValueError(f"negative distance {distance}")
        if self.distance_history and self.distance_history[-1] > 0:
            self.contraction_ratios.append(distance / self.distance_history[-1])
        elif self.distance_history:
            self.contraction_ratios.append(0.0)
        self.distance_history.append(distance)

    @property
    def total_path_violations(self) -> int:
        """Samples above the Feynman-Kac bound; an outer record counts its inner solves."""
        if self.inner_states:
            return sum(inner.total_path_violations for inner in self.inner_states)
        return sum(self.path_violations)

    def transition(self, status: str, blowup_time: float | None = None) -> None:
        if self.status in _FINAL and status != self.status:
            raise ValueError(f"cannot move from {self.status} to {status}")
        self.status = status
        if status == BLOW_UP:
            self.blowup_time = blowup_time


@dataclass(frozen=True)
class TruncationLevel:
    n: float

    def __post_init__(self) -> None:
        if not self.n >= 1:
            raise ProblemError(f"truncation level must be >= 1, got {self.n}")


# ---------------------------------------------------------------------------
# Truncation
# ---------------------------------------------------------------------------

def clamp_radial(r: np.ndarray, n: float, axes: tuple[int, ...]) -> np.ndarray:
    """r inside the ball of radius n, n r / |r| outside; the norm runs over ``axes``."""
    norm = np.sqrt(np.sum(r * r, axis=axes, keepdims=True))
    return r * np.minimum(1.0, n / np.maximum(norm, np.finfo(float).tiny))


def truncate_coefficients(spec: ProblemSpec, level: TruncationLevel) -> ProblemSpec:
    """Compose F and g with the radial clamp in (r1, r2); r3 is left alone."""
    n = level.n
    nonlinearity, source = spec.nonlinearity, spec.source

    def truncated_nonlinearity(t, x, r1, r2):
        return nonlinearity(t, x, clamp_radial(r1, n, (-1,)), clamp_radial(r2, n, (-2, -1)))

    def truncated_source(t, x, r1, r2, r3):
        return source(t, x, clamp_radial(r1, n, (-1,)), clamp_radial(r2, n, (-2, -1)), r3)

    return spec.replace(nonlinearity=truncated_nonlinearity, source=truncated_source)


# ---------------------------------------------------------------------------
# PDE-time views
# ---------------------------------------------------------------------------

def pde_view(psi: PsiField) -> PsiField:
    """Reindex by u_t = psi_{T-t}."""
    gradients = None if psi.gradients is None else psi.gradients[::-1].copy()
    return dataclasses.replace(
        psi, values=psi.values[::-1].copy(), stderr=psi.stderr[::-1].copy(), gradients=gradients,
    )


def cb1_trace(field: PsiField) -> np.ndarray:
    return np.array([cb1_norm(field.values[k], field.lattice) for k in range(field.grid.n_slices)])


def detect_blowup(trace: np.ndarray, level: float, times: np.ndarray) -> float | None:
    """First time the PDE-time C1_b trace reaches ``level``, else None."""
    crossed = np.flatnonzero(np.asarray(trace) >= level)
    if crossed.size == 0:
        return None
    return float(times[crossed[0]])


def valid_before(u: PsiField, t_n: float) -> PsiField | None:
    """The PDE-time slices with ``t < t_n``; None when fewer than two remain."""
    count = int(np.count_nonzero(u.grid.slice_times < t_n))
    if count < 2:
        return None
    grid = TimeGrid(float(u.grid.slice_times[count - 1]), count - 1)
    gradients = None if u.gradients is None else u.gradients[:count].copy()
    return dataclasses.replace(
        u, grid=grid, values=u.values[:count].copy(), stderr=u.stderr[:count].copy(), gradients=gradients,
    )


# ---------------------------------------------------------------------------
# The map and its metric
# ---------------------------------------------------------------------------

def drift_from_field(spec: ProblemSpec, psi: PsiField) -> DriftField:
    """x -> F_{T-s}(x, psi_s(x), grad psi_s(x)) by interpolation of ``psi``."""
    if psi.gradients is None:
        raise ProblemError("psi field has no gradients")
    d, m = spec.dim_d, spec.dim_m
    n_slices, n_nodes = psi.values.shape[:2]
    table = np.concatenate([psi.values, psi.gradients.reshape(n_slices, n_nodes, d * m)], axis=-1)
    grid, lattice = psi.grid, psi.lattice

    def drift(k: int, x: np.ndarray) -> np.ndarray:
        sampled = interpolate(table[k], lattice, x)
        r1 = sampled[..., :m]
        r2 = sampled[..., m:].reshape(x.shape[:-1] + (d, m))
        return spec.nonlinearity_at(grid.time(grid.n_steps - k), x, r1, r2)

    return drift


def phi_map(
    spec: ProblemSpec,
    psi_in: PsiField,
    config: SolverConfig,
    rng: RngStream,
    *,
    path_bound: float | None = None,
) -> PsiField:
    """One application of the map: drift built from ``psi_in``, psi re-estimated everywhere."""
    return estimate_psi_field(
        spec, drift_from_field(spec, psi_in), psi_in.lattice, psi_in.grid, config, rng, path_bound=path_bound,
    )


def _weights(grid: TimeGrid, lam: float) -> np.ndarray:
    return np.exp(-lam * (grid.horizon - grid.slice_times))


def _check_pair(a: PsiField, b: PsiField) -> None:
    if not a.same_layout(b):
        raise FieldMismatchError("fields live on different lattices or time grids")
    if a.gradients is None or b.gradients is None:
        raise FieldMismatchError("distance needs gradients on both fields")


def rho_proxy_distance(psi_a: PsiField, psi_b: PsiField, lam: float) -> float:
    """sup_t e^{-lam (T-t)} (max |dpsi| + max |d grad psi|)."""
    _check_pair(psi_a, psi_b)
    value = np.linalg.norm(psi_a.values - psi_b.values, axis=-1).max(axis=1)
    n_slices, n_nodes = psi_a.values.shape[:2]
    grad = np.linalg.norm((psi_a.gradients - psi_b.gradients).reshape(n_slices, n_nodes, -1), axis=-1).max(axis=1)
    return float((_weights(psi_a.grid, lam) * (value + grad)).max())


def _second_difference_distance(psi_a: PsiField, psi_b: PsiField, lam: float) -> float:
    n_slices, n_nodes = psi_a.values.shape[:2]
    hess = periodic_hessian(psi_a.values - psi_b.values, psi_a.lattice)
    term = np.linalg.norm(hess.reshape(n_slices, n_nodes, -1), axis=-1).max(axis=1)
    return rho_proxy_distance(psi_a, psi_b, lam) + float((_weights(psi_a.grid, lam) * term).max())


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def _require_assumptions(
    spec: ProblemSpec,
    config: SolverConfig,
    lattice: Lattice,
    grid: TimeGrid,
    assumptions: AssumptionReport | None,
    names: tuple[str, ...],
) -> AssumptionReport | None:
    if config.override_assumptions:
        return assumptions
    report = assumptions or probe_assumptions(
        spec, config.kato_pair, config.probe_budget, lattice, grid,
        box=config.probe_box, alpha_threshold=config.alpha_threshold,
    )
    failing = [name for name in names if not report.pass_flags.get(name, False)]
    if failing:
        detail = f" ({report.failure})" if report.failure else ""
        raise AssumptionError(f"hypothesis probes failed: {', '.join(failing)}{detail}")
    return report


def picard_solve(
    spec: ProblemSpec,
    config: SolverConfig,
    rng: RngStream,
    *,
    assumptions: AssumptionReport | None = None,
    lattice: Lattice | None = None,
    grid: TimeGrid | None = None,
) -> tuple[PsiField, PicardState]:
    """Iterate the map from the F = 0 field until the proxy distance drops below tol.

    Returns the last iterate (engine time) and the iteration record. A
    blow-up during simulation, or a truncated run whose C1_b trace reaches
    the level, ends with status ``blow-up``.
    """
    lattice = lattice or config.lattice(spec.dim_d)
    grid = grid or config.time_grid(spec.horizon)
    _require_assumptions(spec, config, lattice, grid, assumptions, ("H_a_b", "H_V_u0", "H0_F_g"))

    run_spec = spec
    if config.truncation_level is not None:
        run_spec = truncate_coefficients(spec, TruncationLevel(config.truncation_level))

    bound = k_constant(run_spec, lattice, grid)
    state = PicardState(lambda_weight=config.lambda_for(spec.horizon))
    started = time.perf_counter()
    try:
        psi = estimate_psi_field(run_spec, None, lattice, grid, config, rng, path_bound=bound)
    except BlowUpError as exc:
        state.transition(BLOW_UP, exc.time)
        raise
    state.record(psi, None, time.perf_counter() - started)

    converged = False
    for iteration in range(1, config.max_iter + 1):
        started = time.perf_counter()
        try:
            new = phi_map(run_spec, psi, config, rng, path_bound=bound)
        except BlowUpError as exc:
            logger.warning("blow-up in iteration %d: %s", iteration, exc)
            state.transition(BLOW_UP, exc.time)
            return psi, state
        distance = rho_proxy_distance(new, psi, state.lambda_weight)
        state.record(new, distance, time.perf_counter() - started)
        logger.info("picard iteration %d: distance %.3e", iteration, distance)
        psi = new
        if distance < config.tol:
            converged = True
            break

    if config.truncation_level is not None:
        u = pde_view(psi)
        t_n = detect_blowup(cb1_trace(u), config.truncation_level, grid.slice_times)
        if t_n is not None:
            logger.warning("C1_b trace reaches level %g at t=%g", config.truncation_level, t_n)
            state.transition(BLOW_UP, t_n)
            return psi, state
    state.transition(CONVERGED if converged else MAX_ITERATIONS)
    return psi, state


def freeze_source(spec: ProblemSpec, h: np.ndarray, lattice: Lattice, grid: TimeGrid) -> ProblemSpec:
    """Spatial-source problem with g_t(x, h_t, grad h_t, hess h_t) for a PDE-time field ``h``.

    ``h`` has shape ``(n_slices, n_nodes, m)`` and is indexed by PDE time.
    """
    d, m = spec.dim_d, spec.dim_m
    n_slices, n_nodes = h.shape[:2]
    table = np.concatenate([
        h,
        periodic_gradient(h, lattice).reshape(n_slices, n_nodes, d * m),
        periodic_hessian(h, lattice).reshape(n_slices, n_nodes, d * d * m),
    ], axis=-1)
    source = spec.source
    tolerance = 1e-9 * grid.horizon

    def frozen(t: float, x: np.ndarray, r1: np.ndarray, r2: np.ndarray, r3: np.ndarray) -> np.ndarray:
        j = grid.nearest_index(t)
        sampled = interpolate(table[j], lattice, x)
        if abs(grid.time(j) - t) > tolerance:
            lo = min(int(t / grid.step_size), grid.n_steps - 1)
            w = (t - grid.time(lo)) / grid.step_size
            sampled = (1 - w) * interpolate(table[lo], lattice, x) + w * interpolate(table[lo + 1], lattice, x)
        lead = x.shape[:-1]
        return source(
            t, x,
            sampled[..., :m],
            sampled[..., m:m + d * m].reshape(lead + (d, m)),
            sampled[..., m + d * m:].reshape(lead + (d, d, m)),
        )

    return spec.replace(source=frozen, spatial_source=True, name=f"{spec.name}/frozen")


def outer_psi_solve(
    spec: ProblemSpec,
    config: SolverConfig,
    rng: RngStream,
    *,
    assumptions: AssumptionReport | None = None,
    lattice: Lattice | None = None,
    grid: TimeGrid | None = None,
) -> tuple[PsiField, PicardState]:
    """Iterate h -> u^h for a source depending on (u, grad u, hess u).

    Each pass freezes the source at the previous solution and runs the
    Picard solver on the frozen problem; passes stop when successive
    solutions agree under the proxy distance plus a second-difference term.
    The first pass has no predecessor, so at least two passes always run:
    a source that ignores (u, grad u, hess u) is confirmed by a second pass
    that reproduces the first and stops at distance 0.
    """
    lattice = lattice or config.lattice(spec.dim_d)
    grid = grid or config.time_grid(spec.horizon)
    report = _require_assumptions(spec, config, lattice, grid, assumptions, ("H_a_b", "H_V_u0"))
    if report is not None and report.alpha_probe > (1 - HEADROOM) * config.alpha_threshold:
        raise AssumptionError(
            f"source slope in the Hessian argument {report.alpha_probe:.3g} "
            f"exceeds threshold {config.alpha_threshold:g}"
        )
    inner_config = dataclasses.replace(config, override_assumptions=True)

    state = PicardState(lambda_weight=config.lambda_for(spec.horizon))
    h = np.zeros((grid.n_slices, lattice.n_nodes, spec.dim_m))
    previous: PsiField | None = None
    converged = False
    for outer in range(1, config.outer_max_iter + 1):
        started = time.perf_counter()
        frozen = freeze_source(spec, h, lattice, grid)
        psi, inner = picard_solve(frozen, inner_config, rng, lattice=lattice, grid=grid)
        state.inner_states.append(inner)
        if inner.status == BLOW_UP:
            state.record(psi, None, time.perf_counter() - started)
            state.transition(BLOW_UP, inner.blowup_time)
            return psi, state
        distance = None if previous is None else _second_difference_distance(psi, previous, state.lambda_weight)
        state.record(psi, distance, time.perf_counter() - started)
        if distance is not None:
            logger.info("outer pass %d: distance %.3e", outer, distance)
            if distance < config.tol:
                converged = True
                break
        previous = psi
        h = pde_view(psi).values

    state.transition(CONVERGED if converged else MAX_ITERATIONS)
    return state.psi, state


def fk_sup_bound_holds(state: PicardState, k: float) -> bool:
    """No path sample exceeded the bound and every iterate obeys max|psi| <= k + 3 max stderr."""
    if state.total_path_violations:
        return False
    if not math.isfinite(k):
        return True
    return all(sup <= k + 3.0 * err for sup, err in zip(state.sup_norms, state.max_stderr))
