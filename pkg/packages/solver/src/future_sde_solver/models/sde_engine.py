"""Euler-Maruyama simulation of the frozen-coefficient SDE with its first variation.

Engine time ``s`` runs forward from the launch slice; coefficients are read
at PDE time ``T - s``. That reversal happens here and nowhere else in the
engine. States are kept unwrapped in R^d; the ProblemSpec accessors reduce
them to the torus when coefficients are evaluated.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TypeVar

import numpy as np

from future_sde_solver.models.errors import BlowUpError, ProblemError
from future_sde_solver.models.lattice import TimeGrid
from future_sde_solver.models.problem import ProblemSpec
from future_sde_solver.models.rng import BROWNIAN, RngStream

logger = logging.getLogger(__name__)

DriftField = Callable[[int, np.ndarray], np.ndarray]
"""Extra drift ``(engine slice index, unwrapped x) -> (..., d)``."""

RunningIntegrand = Callable[[int, np.ndarray], np.ndarray]
"""Running integrand ``(engine slice index, unwrapped x) -> (..., m)``."""

T = TypeVar("T")
R = TypeVar("R")

SYMMETRY_TOL = 1e-9


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int) -> list[R]:
    """Apply ``fn`` to ``items`` on up to ``workers`` threads, keeping input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Diffusion coefficient
# ---------------------------------------------------------------------------

def _check_symmetric(a: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(a).max())) if a.size else 1.0
    if np.abs(a - np.swapaxes(a, -1, -2)).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ProblemError("diffusion matrix is not symmetric")
    return scale


def sigma_from_a(a: np.ndarray) -> np.ndarray:
    """Symmetric positive-definite square root of ``2a`` (batched over leading axes)."""
    a = np.asarray(a, dtype=float)
    _check_symmetric(a)
    w, v = np.linalg.eigh(a)
    if np.any(w <= 0):
        raise ProblemError(f"diffusion matrix has eigenvalue {float(w.min()):.3g} <= 0")
    return (v * np.sqrt(2.0 * w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def _sigma_and_inverse(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if a.shape[-1] == 1:
        if np.any(~(a > 0)):
            raise ProblemError("singular diffusion at a visited point")
        sigma = np.sqrt(2.0 * a)
        return sigma, 1.0 / sigma
    _check_symmetric(a)
    w, v = np.linalg.eigh(a)
    if np.any(~(w > 0)):
        raise ProblemError("singular diffusion at a visited point")
    root = np.sqrt(2.0 * w)
    vt = np.swapaxes(v, -1, -2)
    return (v * root[..., None, :]) @ vt, (v / root[..., None, :]) @ vt


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Particles launched from a batch of points at one slice.

    Array layout is ``(batch, particle, retained slice, ...)``.
    """

    grid: TimeGrid
    start_index: int
    stop_index: int
    start_points: np.ndarray
    node_ids: tuple[int, ...]
    retained: tuple[int, ...]
    states: np.ndarray
    fk_exponent: np.ndarray
    fk_abs_exponent: np.ndarray
    deriv_flows: np.ndarray | None = None
    bismut_integral: np.ndarray | None = None
    weighted_integral: np.ndarray | None = None
    potential_flow: np.ndarray | None = None
    potential_moment: np.ndarray | None = None
    running_gradient: np.ndarray | None = None

    @property
    def particles(self) -> int:
        return self.states.shape[1]

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    def position(self, slice_index: int) -> int:
        try:
            return self.retained.index(slice_index)
        except ValueError:
            raise ProblemError(f"slice {slice_index} was not retained (have {self.retained})") from None

    def gradient_weight(self, slice_index: int, weighted: bool) -> np.ndarray:
        """Per-direction weight w with grad E[f(X_s) e^A] = E[f(X_s) e^A w], shape (batch, particles, d).

        The Bismut integral over (s - t); with ``weighted`` the potential term
        int (1 - (q - t)/(s - t)) grad V J dq is added.
        """
        if self.bismut_integral is None:
            raise ProblemError("ensemble carries no derivative data")
        span = self.grid.time(slice_index) - self.grid.time(self.start_index)
        pos = self.position(slice_index)
        weight = self.bismut_integral[:, :, pos, :] / span
        if weighted:
            weight = weight + self.potential_flow[:, :, pos, :] - self.potential_moment[:, :, pos, :] / span
        return weight


def _jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, scale: float) -> np.ndarray:
    """Central-difference Jacobian, column ``i`` = d fn / d x_i; step scale*(1+|x|)."""
    h = scale * (1.0 + np.linalg.norm(x, axis=-1, keepdims=True))
    columns = []
    for i in range(x.shape[-1]):
        up = x.copy()
        down = x.copy()
        up[..., i] += h[..., 0]
        down[..., i] -= h[..., 0]
        columns.append((fn(up) - fn(down)) / (2.0 * h))
    return np.stack(columns, axis=-1)


def _simulate_block(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    t_index: int,
    points: np.ndarray,
    node_ids: Sequence[int],
    grid: TimeGrid,
    particle_range: tuple[int, int],
    rng: RngStream,
    want_derivatives: bool,
    retained: tuple[int, ...],
    stop: int,
    integrand: RunningIntegrand | None,
    jacobian_step: float,
) -> dict[str, np.ndarray]:
    d, m = spec.dim_d, spec.dim_m
    n_batch = points.shape[0]
    count = particle_range[1] - particle_range[0]
    n_rem = stop - t_index
    dt = grid.step_size
    sqrt_dt = math.sqrt(dt)

    noise = np.stack([
        rng.normals(t_index, node, n_rem, d, particle_range, BROWNIAN) for node in node_ids
    ]) if n_rem else np.zeros((n_batch, count, 0, d))

    x = np.broadcast_to(points[:, None, :], (n_batch, count, d)).astype(float)
    fk = np.zeros((n_batch, count))
    fk_abs = np.zeros((n_batch, count))
    flow = np.broadcast_to(np.eye(d), (n_batch, count, d, d)).copy() if want_derivatives else None
    bismut = np.zeros((n_batch, count, d)) if want_derivatives else None
    pot_flow = np.zeros((n_batch, count, d)) if want_derivatives else None
    pot_moment = np.zeros((n_batch, count, d)) if want_derivatives else None
    running = np.zeros((n_batch, count, m)) if integrand is not None else None
    running_grad = np.zeros((n_batch, count, d, m)) if integrand is not None and want_derivatives else None

    kept: dict[str, list[np.ndarray]] = {key: [] for key in (
        "states", "fk", "fk_abs", "flows", "bismut", "pot_flow", "pot_moment", "running", "running_grad",
    )}

    def keep() -> None:
        kept["states"].append(x.copy())
        kept["fk"].append(fk.copy())
        kept["fk_abs"].append(fk_abs.copy())
        if want_derivatives:
            kept["flows"].append(flow.copy())
            kept["bismut"].append(bismut.copy())
            kept["pot_flow"].append(pot_flow.copy())
            kept["pot_moment"].append(pot_moment.copy())
        if running is not None:
            kept["running"].append(running.copy())
        if running_grad is not None:
            kept["running_grad"].append(running_grad.copy())

    if t_index in retained:
        keep()

    for k in range(t_index, stop):
        pde_time = grid.time(grid.n_steps - k)

        def drift(y: np.ndarray, k: int = k, pde_time: float = pde_time) -> np.ndarray:
            b = spec.drift_at(pde_time, y)
            if drift_extra is not None:
                b = b + drift_extra(k, y)
            return b

        sigma, sigma_inv = _sigma_and_inverse(np.asarray(spec.diffusion_at(pde_time, x), dtype=float))
        b_eff = drift(x)
        dw = noise[:, :, k - t_index, :] * sqrt_dt
        potential = spec.potential_at(pde_time, x)

        if running is not None:
            increment = integrand(k, x) * np.exp(fk)[..., None] * dt
            if running_grad is not None:
                if k == t_index:
                    # Launch point is deterministic: differentiate the integrand itself.
                    jac = _jacobian(lambda y, k=k: integrand(k, y), x, jacobian_step)
                    running_grad = running_grad + np.swapaxes(jac, -1, -2) * dt
                else:
                    elapsed = (k - t_index) * dt
                    weight = bismut / elapsed + pot_flow - pot_moment / elapsed
                    running_grad = running_grad + weight[..., :, None] * increment[..., None, :]
            running = running + increment

        if want_derivatives:
            bismut = bismut + np.einsum("...lj,...l->...j", sigma_inv @ flow, dw)
            grad_v = _jacobian(lambda y, t=pde_time: spec.potential_at(t, y)[..., None], x, jacobian_step)
            pot_rate = (grad_v @ flow)[..., 0, :]
            pot_flow = pot_flow + pot_rate * dt
            pot_moment = pot_moment + pot_rate * ((k - t_index) * dt) * dt
            db = _jacobian(drift, x, jacobian_step)

            def sigma_at(y: np.ndarray, pde_time: float = pde_time) -> np.ndarray:
                return _sigma_and_inverse(np.asarray(spec.diffusion_at(pde_time, y), dtype=float))[0]

            dsigma = _jacobian(lambda y: sigma_at(y).reshape(y.shape[:-1] + (d * d,)), x, jacobian_step)
            dsigma = dsigma.reshape(x.shape[:-1] + (d, d, d))
            noise_term = np.einsum("...lci,...c->...li", dsigma, dw)
            flow = flow + (db @ flow) * dt + noise_term @ flow

        fk = fk + potential * dt
        fk_abs = fk_abs + np.abs(potential) * dt
        x = x + b_eff * dt + np.einsum("...lj,...j->...l", sigma, dw)

        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.all(np.isfinite(x), axis=-1))[0]
            node, particle = int(node_ids[bad[0]]), int(particle_range[0] + bad[1])
            raise BlowUpError(
                f"non-finite state at engine time {grid.time(k + 1):.6g} "
                f"(node {node}, particle {particle})",
                time=grid.time(k + 1),
                location=(node, particle),
            )
        if k + 1 in retained:
            keep()

    out = {
        "states": np.stack(kept["states"], axis=2),
        "fk": np.stack(kept["fk"], axis=2),
        "fk_abs": np.stack(kept["fk_abs"], axis=2),
    }
    for key in ("flows", "bismut", "pot_flow", "pot_moment", "running", "running_grad"):
        if kept[key]:
            out[key] = np.stack(kept[key], axis=2)
    return out


def simulate_ensemble(
    spec: ProblemSpec,
    drift_extra: DriftField | None,
    launch: tuple[int, np.ndarray],
    grid: TimeGrid,
    particles: int,
    rng: RngStream,
    want_derivatives: bool = False,
    *,
    node_ids: Sequence[int] | None = None,
    retain: Iterable[int] | None = None,
    stop_index: int | None = None,
    integrand: RunningIntegrand | None = None,
    jacobian_step: float = 1e-4,
    workers: int = 1,
) -> PathEnsemble:
    """Simulate ``particles`` paths from each launch point.

    ``launch`` is ``(t_index, x)`` with ``x`` of shape ``(d,)`` or
    ``(batch, d)``; ``node_ids`` address the noise streams of the batch
    (default ``0..batch-1``). The particle range is split across
    ``workers`` threads; the split never changes the numbers produced.
    """
    t_index, points = launch
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[-1] != spec.dim_d:
        raise ProblemError(f"launch point has dimension {points.shape[-1]}, problem has {spec.dim_d}")
    stop = grid.n_steps if stop_index is None else stop_index
    if not 0 <= t_index <= stop <= grid.n_steps:
        raise ProblemError(f"launch slice {t_index} / stop {stop} outside grid of {grid.n_steps} steps")
    if particles < 1:
        raise ProblemError(f"particles must be >= 1, got {particles}")
    ids = tuple(range(len(points))) if node_ids is None else tuple(int(i) for i in node_ids)
    if len(ids) != len(points):
        raise ProblemError("node_ids must match the launch batch")
    retained = tuple(sorted(set(retain) | {t_index, stop})) if retain is not None else (t_index, stop)
    if retained[0] < t_index or retained[-1] > stop:
        raise ProblemError(f"retained slices {retained} outside [{t_index}, {stop}]")

    bounds = np.linspace(0, particles, min(max(workers, 1), particles) + 1).astype(int)
    ranges = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

    def run(particle_range: tuple[int, int]) -> dict[str, np.ndarray]:
        return _simulate_block(
            spec, drift_extra, t_index, points, ids, grid, particle_range, rng,
            want_derivatives, retained, stop, integrand, jacobian_step,
        )

    blocks = map_ordered(run, ranges, workers)

    def joined(key: str) -> np.ndarray | None:
        if key not in blocks[0]:
            return None
        if len(blocks) == 1:
            return blocks[0][key]
        return np.concatenate([b[key] for b in blocks], axis=1)

    logger.debug("simulated %d x %d paths from slice %d to %d", len(points), particles, t_index, stop)
    return PathEnsemble(
        grid=grid,
        start_index=t_index,
        stop_index=stop,
        start_points=points,
        node_ids=ids,
        retained=retained,
        states=joined("states"),
        fk_exponent=joined("fk"),
        fk_abs_exponent=joined("fk_abs"),
        deriv_flows=joined("flows"),
        bismut_integral=joined("bismut"),
        weighted_integral=joined("running"),
        potential_flow=joined("pot_flow"),
        potential_moment=joined("pot_moment"),
        running_gradient=joined("running_grad"),
    )


# ---------------------------------------------------------------------------
# Derivative flow checks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowScaling:
    linear: bool
    moment_ratio: float
    p: float

    def __bool__(self) -> bool:
        return self.linear


def derivative_scaling_check(ensemble: PathEnsemble, v: np.ndarray, c: float, p: float = 2.0) -> FlowScaling:
    """Check grad_{cv} X == c grad_v X bitwise and report sup E|grad_v X|^p / |v|^p."""
    if ensemble.deriv_flows is None:
        raise ProblemError("ensemble carries no derivative flow")
    v = np.asarray(v, dtype=float)
    flows = ensemble.deriv_flows
    directional = flows @ v
    scaled = flows @ (c * v)
    linear = bool(np.array_equal(scaled, c * directional))
    norm_v = float(np.linalg.norm(v))
    if norm_v == 0.0:
        return FlowScaling(linear, 0.0, p)
    moments = (np.linalg.norm(directional, axis=-1) ** p).mean(axis=1) / norm_v**p
    return FlowScaling(linear, float(moments.max()), p)
