"""Feynman-Kac estimators on the lattice: psi, the weighted semigroup, u^V(f), Bismut gradients."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from future_sde_solver.models.config import SolverConfig
from future_sde_solver.models.errors import BlowUpError, FieldMismatchError, ProblemError
from future_sde_solver.models.lattice import Lattice, TimeGrid, interpolate, periodic_gradient
from future_sde_solver.models.problem import ProblemSpec, cb1_norm
from future_sde_solver.models.rng import RngStream
from future_sde_solver.models.sde_engine import (
    DriftField,
    PathEnsemble,
    RunningIntegrand,
    map_ordered,
    simulate_ensemble,
)

logger = logging.getLogger(__name__)

SpatialFunction = Callable[[np.ndarray], np.ndarray]

PATH_BOUND_RTOL = 1e-9


@dataclass(eq=False)
class PsiField:
    """psi (and grad psi) on time slices x lattice nodes.

    ``values`` and ``stderr`` have shape ``(n_slices, n_nodes, m)``;
    ``gradients`` has shape ``(n_slices, n_nodes, d, m)`` when present.
    """

    grid: TimeGrid
    lattice: Lattice
    values: np.ndarray
    stderr: np.ndarray
    gradients: np.ndarray | None = None
    provenance: str = "grid-difference"
    path_violations: int = 0

    def __post_init__(self) -> None:
        expected = (self.grid.n_slices, self.lattice.n_nodes)
        if self.values.shape[:2] != expected or self.values.ndim != 3:
            raise FieldMismatchError(f"values shape {self.values.shape} does not match grid {expected}")
        if self.stderr.shape != self.values.shape:
            raise FieldMismatchError("stderr shape differs from values shape")
        if self.gradients is not None:
            want = self.values.shape[:2] + (self.lattice.dim, self.values.shape[2])
            if self.gradients.shape != want:
                raise FieldMismatchError(f"gradients shape {self.gradients.shape}, expected {want}")
        if not np.all(np.isfinite(self.values)):
            k, node = np.argwhere(~np.all(np.isfinite(self.values), axis=-1))[0]
            raise BlowUpError(
                f"non-finite field value at slice {k}, node {node}",
                time=self.grid.time(int(k)),
                location=int(node),
            )

    @property
    def dim_m(self) -> int:
        return self.values.shape[2]

    def same_layout(self, other: PsiField) -> bool:
        return (
            self.lattice == other.lattice
            and self.grid.n_steps == other.grid.n_steps
            and self.grid.horizon == other.grid.horizon
            and self.values.shape == other.values.shape
        )

    def with_gradients(self, gradients: np.ndarray, provenance: str) -> PsiField:
        return dataclasses.replace(self, gradients=gradients, provenance=provenance)


@dataclass(frozen=True)
class FieldContext:
    """What a Bismut re-estimation of a field needs."""

    spec: ProblemSpec
    drift_extra: DriftField | None
    config: SolverConfig
    rng: RngStream


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------

def _node_chunks(config: SolverConfig, n_nodes: int, n_steps: int, dim: int) -> list[np.ndarray]:
    per_node = config.particles * max(n_steps, 1) * dim * 8 * 4
    size = max(1, config.chunk_bytes // max(per_node, 1))
    return [np.arange(lo, min(lo + size, n_nodes)) for lo in range(0, n_nodes, size)]


def _mean_and_stderr(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over the particle axis (axis 1)."""
    n = samples.shape[1]
    mean = samples.mean(axis=1)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, samples.std(axis=1, ddof=1) / math.sqrt(n)


def _source_integrand(spec: ProblemSpec, grid: TimeGrid) -> RunningIntegrand:
    def integrand(k: int, x: np.ndarray) -> np.ndarray:
        return spec.source_at(grid.time(grid.n_steps - k), x)

    return integrand


def _ensembles(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    t_index: int,
    lattice: Lattice,
    grid: TimeGrid,
    config: SolverConfig,
    rng: RngStream,
    *,
    stop_index: int | None = None,
    want_derivatives: bool = False,
    integrand: RunningIntegrand | None = None,
    reduce: Callable[[PathEnsemble], tuple[np.ndarray, ...]],
) -> tuple[np.ndarray, ...]:
    """Launch from every node at ``t_index`` in node chunks and reduce each chunk."""
    stop = grid.n_steps if stop_index is None else stop_index
    chunks = _node_chunks(config, lattice.n_nodes, stop - t_index, spec.dim_d)
    coords = lattice.coords

    def run(nodes: np.ndarray) -> tuple[np.ndarray, ...]:
        ensemble = simulate_ensemble(
            spec, drift_extra, (t_index, coords[nodes]), grid, config.particles, rng,
            want_derivatives, node_ids=nodes, stop_index=stop, integrand=integrand,
            jacobian_step=config.jacobian_step,
        )
        return reduce(ensemble)

    parts = map_ordered(run, chunks, config.workers)
    return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(len(parts[0])))


def _terminal(spec: ProblemSpec, ensemble: PathEnsemble) -> np.ndarray:
    """Per-particle u0(X_T) e^{int V}, shape (batch, particles, m)."""
    end = ensemble.position(ensemble.stop_index)
    terminal = spec.initial_at(ensemble.states[:, :, end, :])
    return terminal * np.exp(ensemble.fk_exponent[:, :, end])[..., None]


def _functional(spec: ProblemSpec, ensemble: PathEnsemble) -> np.ndarray:
    """Per-particle u0(X_T) e^{int V} + sum g e^{int V} dt, shape (batch, particles, m)."""
    value = _terminal(spec, ensemble)
    if ensemble.weighted_integral is not None:
        value = value + ensemble.weighted_integral[:, :, ensemble.position(ensemble.stop_index), :]
    return value


def _functional_gradient(spec: ProblemSpec, ensemble: PathEnsemble) -> np.ndarray:
    """Per-particle gradient samples of the functional, shape (batch, particles, d, m).

    The terminal term carries the weight of the whole horizon; each running
    contribution already carries the weight of its own time in the engine.
    """
    weight = ensemble.gradient_weight(ensemble.stop_index, weighted=True)
    samples = weight[..., :, None] * _terminal(spec, ensemble)[..., None, :]
    if ensemble.running_gradient is not None:
        samples = samples + ensemble.running_gradient[:, :, ensemble.position(ensemble.stop_index)]
    return samples


def _bismut_samples(
    ensemble: PathEnsemble, payoff: np.ndarray, s_index: int, weighted: bool
) -> np.ndarray:
    """payoff times the gradient weight at ``s_index`` for every axis j: (batch, particles, d, m)."""
    if weighted:
        payoff = payoff * np.exp(ensemble.fk_exponent[:, :, ensemble.position(s_index)])[..., None]
    return ensemble.gradient_weight(s_index, weighted)[..., :, None] * payoff[..., None, :]


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

def _estimate_slice(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    slice_index: int,
    lattice: Lattice,
    grid: TimeGrid,
    config: SolverConfig,
    rng: RngStream,
    with_bismut: bool,
    path_bound: float | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, int]:
    """Mean, stderr, optional Bismut gradient and the count of samples above ``path_bound``."""
    if not spec.spatial_source:
        raise ProblemError("psi estimation needs a spatial-only source; use the outer solver")
    if not 0 <= slice_index <= grid.n_steps:
        raise ProblemError(f"slice {slice_index} outside grid of {grid.n_steps} steps")
    coords = lattice.coords
    if slice_index == grid.n_steps:
        values = np.array(spec.initial_at(coords), dtype=float)
        return values, np.zeros_like(values), None, 0

    integrand = _source_integrand(spec, grid)
    limit = math.inf if path_bound is None else path_bound * (1.0 + PATH_BOUND_RTOL)

    def reduce(ensemble: PathEnsemble) -> tuple[np.ndarray, ...]:
        payoff = _functional(spec, ensemble)
        over = np.count_nonzero(np.linalg.norm(payoff, axis=-1) > limit, axis=1)
        mean, err = _mean_and_stderr(payoff)
        if not with_bismut:
            return mean, err, over
        grad, _ = _mean_and_stderr(_functional_gradient(spec, ensemble))
        return mean, err, over, grad

    parts = _ensembles(
        spec, drift_extra, slice_index, lattice, grid, config, rng,
        want_derivatives=with_bismut, integrand=integrand, reduce=reduce,
    )
    violations = int(parts[2].sum())
    return parts[0], parts[1], parts[3] if with_bismut else None, violations


def estimate_psi_slice(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    slice_index: int,
    lattice: Lattice,
    config: SolverConfig,
    rng: RngStream,
    grid: TimeGrid | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """psi_s at every node, with Monte Carlo standard errors, each ``(n_nodes, m)``."""
    grid = grid or config.time_grid(spec.horizon)
    values, stderr, _, _ = _estimate_slice(spec, drift_extra, slice_index, lattice, grid, config, rng, False)
    return values, stderr


def estimate_psi_field(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    lattice: Lattice,
    grid: TimeGrid,
    config: SolverConfig,
    rng: RngStream,
    gradient_mode: str | None = None,
    *,
    path_bound: float | None = None,
) -> PsiField:
    """Every slice of psi, gradients filled by ``gradient_mode`` (config default).

    With ``path_bound`` set, every per-path sample is checked against it
    before averaging; the count of samples above it lands in
    ``path_violations``.
    """
    mode = gradient_mode or config.gradient_mode
    with_bismut = mode == "bismut"
    values = np.empty((grid.n_slices, lattice.n_nodes, spec.dim_m))
    stderr = np.empty_like(values)
    bismut = np.empty((grid.n_slices, lattice.n_nodes, spec.dim_d, spec.dim_m)) if with_bismut else None
    violations = 0
    for k in range(grid.n_slices):
        values[k], stderr[k], grad, over = _estimate_slice(
            spec, drift_extra, k, lattice, grid, config, rng, with_bismut, path_bound,
        )
        violations += over
        if with_bismut:
            bismut[k] = grad if grad is not None else periodic_gradient(values[k], lattice)
    if violations:
        logger.warning("%d path samples exceed the Feynman-Kac bound %.6g", violations, path_bound)
    field = PsiField(grid, lattice, values, stderr, path_violations=violations)
    if with_bismut:
        return field.with_gradients(bismut, "bismut")
    return gradient_of_field(field)


def semigroup_apply(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    t_index: int,
    s_index: int,
    f: SpatialFunction,
    config: SolverConfig,
    rng: RngStream,
    lattice: Lattice,
    grid: TimeGrid | None = None,
    weighted: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """P^V_{t,s} f at every node: mean of f(X_{t,s}) e^{int_t^s V}."""
    grid = grid or config.time_grid(spec.horizon)
    if t_index > s_index:
        raise ProblemError(f"semigroup needs t <= s, got slices {t_index} > {s_index}")
    if t_index == s_index:
        values = np.array(f(lattice.coords), dtype=float)
        return values, np.zeros_like(values)

    def reduce(ensemble: PathEnsemble) -> tuple[np.ndarray, ...]:
        pos = ensemble.position(s_index)
        payoff = f(np.mod(ensemble.states[:, :, pos, :], 1.0))
        if weighted:
            payoff = payoff * np.exp(ensemble.fk_exponent[:, :, pos])[..., None]
        return _mean_and_stderr(payoff)

    return _ensembles(spec, drift_extra, t_index, lattice, grid, config, rng, stop_index=s_index, reduce=reduce)


def u_v_functional(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    t_index: int,
    f: np.ndarray | RunningIntegrand,
    config: SolverConfig,
    rng: RngStream,
    lattice: Lattice,
    grid: TimeGrid | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """u^V_t(f) = int_t^T P^V_{t,s} f_s ds from a single ensemble per node.

    ``f`` is a lattice field of shape ``(n_slices, n_nodes, m)`` (interpolated
    off the lattice) or a callable ``(engine slice index, x) -> (..., m)``.
    """
    grid = grid or config.time_grid(spec.horizon)
    if isinstance(f, np.ndarray):
        table = f
        if table.shape[:2] != (grid.n_slices, lattice.n_nodes):
            raise FieldMismatchError(f"f has shape {table.shape}, lattice field expected")

        def integrand(k: int, x: np.ndarray) -> np.ndarray:
            return interpolate(table[k], lattice, x)
    else:
        integrand = f

    def reduce(ensemble: PathEnsemble) -> tuple[np.ndarray, ...]:
        return _mean_and_stderr(ensemble.weighted_integral[:, :, -1, :])

    return _ensembles(spec, drift_extra, t_index, lattice, grid, config, rng, integrand=integrand, reduce=reduce)


def bismut_gradient(
    ensemble: PathEnsemble,
    f: SpatialFunction,
    direction: np.ndarray,
    s_index: int | None = None,
    weighted: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """grad_v P_{t,s} f at each launch point: (s-t)^-1 E[f(X_s) int <sigma^-1 J v, dW>].

    Returns (estimate, stderr), each ``(batch, m)``. ``weighted`` multiplies
    the payoff by e^{int V} and adds the potential term to the weight, which
    gives grad P^V_{t,s} f.
    """
    if ensemble.deriv_flows is None or ensemble.bismut_integral is None:
        raise ProblemError("ensemble carries no derivative data")
    s = ensemble.stop_index if s_index is None else s_index
    if s <= ensemble.start_index:
        raise ProblemError("bismut gradient needs s > t")
    pos = ensemble.position(s)
    payoff = f(np.mod(ensemble.states[:, :, pos, :], 1.0))
    samples = _bismut_samples(ensemble, payoff, s, weighted)
    projected = np.einsum("bpjm,j->bpm", samples, np.asarray(direction, dtype=float))
    return _mean_and_stderr(projected)


def gradient_of_field(
    field: PsiField,
    mode: str = "grid-difference",
    *,
    context: FieldContext | None = None,
) -> PsiField:
    """Fill gradients by periodic central differences or by Bismut re-estimation."""
    if mode == "grid-difference":
        return field.with_gradients(periodic_gradient(field.values, field.lattice), "grid-difference")
    if mode != "bismut":
        raise ProblemError(f"unknown gradient mode {mode!r}")
    if context is None:
        raise ProblemError("bismut gradients re-simulate every node; pass a FieldContext to opt in")
    field.lattice.require(3, "bismut gradients")
    estimated = estimate_psi_field(
        context.spec, context.drift_extra, field.lattice, field.grid, context.config, context.rng, "bismut",
    )
    return field.with_gradients(estimated.gradients, "bismut")


# ---------------------------------------------------------------------------
# Weights and gradient-estimate diagnostics
# ---------------------------------------------------------------------------

def weighted_mass(ensemble: PathEnsemble, s_index: int | None = None) -> np.ndarray:
    """E[e^{int |V|}] per launch point, the total mass of the V-weighted law."""
    pos = ensemble.position(ensemble.stop_index if s_index is None else s_index)
    return np.exp(ensemble.fk_abs_exponent[:, :, pos]).mean(axis=1)


@dataclass(frozen=True)
class GradientBounds:
    """Empirical constants of the two gradient estimates of P_{t,s}f."""

    k_moment: float
    k_gradient: float
    gradient_sup: float


def gradient_bound_constants(
    ensemble: PathEnsemble,
    f: SpatialFunction,
    grad_f: SpatialFunction | None = None,
    p: float = 2.0,
) -> GradientBounds:
    """k in |grad P f| <= k (s-t)^-1/2 (P|f|^p)^1/p and in |grad P f| <= k (P|grad f|^p)^1/p.

    ``grad_f`` maps ``(..., d)`` to ``(..., d, m)``; without it the second
    constant is reported as nan.
    """
    s = ensemble.stop_index
    span = ensemble.grid.time(s) - ensemble.grid.time(ensemble.start_index)
    d = ensemble.start_points.shape[-1]
    columns = [bismut_gradient(ensemble, f, np.eye(d)[j])[0] for j in range(d)]
    grad = np.stack(columns, axis=-2)
    grad_norm = np.linalg.norm(grad.reshape(grad.shape[0], -1), axis=-1)

    pos = ensemble.position(s)
    x_s = np.mod(ensemble.states[:, :, pos, :], 1.0)
    moment = (np.linalg.norm(f(x_s), axis=-1) ** p).mean(axis=1) ** (1.0 / p)
    ok = moment > 0
    k_moment = float((grad_norm[ok] * math.sqrt(span) / moment[ok]).max()) if ok.any() else 0.0

    k_gradient = math.nan
    if grad_f is not None:
        g = grad_f(x_s)
        grad_moment = (np.linalg.norm(g.reshape(g.shape[:2] + (-1,)), axis=-1) ** p).mean(axis=1) ** (1 / p)
        ok = grad_moment > 0
        k_gradient = float((grad_norm[ok] / grad_moment[ok]).max()) if ok.any() else 0.0
    return GradientBounds(k_moment, k_gradient, float(grad_norm.max()))


def semigroup_cb1_ratio(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    t_index: int,
    s_index: int,
    f: SpatialFunction,
    config: SolverConfig,
    rng: RngStream,
    lattice: Lattice,
    grid: TimeGrid | None = None,
) -> float:
    """||P^V_{t,s} f||_{C1_b} / ||f||_{C1_b} on the lattice."""
    values, _ = semigroup_apply(spec, drift_extra, t_index, s_index, f, config, rng, lattice, grid)
    denominator = cb1_norm(f(lattice.coords), lattice)
    if denominator == 0:
        raise ProblemError("f has zero C1_b norm")
    return cb1_norm(values, lattice) / denominator
