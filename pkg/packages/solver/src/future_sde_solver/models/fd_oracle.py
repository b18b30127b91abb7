"""Method-of-lines finite differences on the periodic lattice.

This module only shares the lattice types with the Monte Carlo side, so the
two can be cross-checked against each other.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import solve_banded

from future_sde_solver.models.errors import FieldMismatchError, InstabilityError, ProblemError
from future_sde_solver.models.feynman_kac import PsiField
from future_sde_solver.models.lattice import Lattice, TimeGrid, periodic_gradient, periodic_hessian
from future_sde_solver.models.problem import ProblemSpec, ellipticity_bounds

logger = logging.getLogger(__name__)

SCHEMES = ("imex-euler", "explicit-rk4")
GROWTH_LIMIT = 1e6


@dataclass(frozen=True)
class CflReport:
    max_stable: float
    used: float
    substeps: int = 1


@dataclass(eq=False)
class FdSolution:
    grid: TimeGrid
    lattice: Lattice
    values: np.ndarray
    cfl_report: CflReport
    scheme: str

    def as_field(self) -> PsiField:
        """The solution as a zero-stderr field, for snapshots and diffs."""
        return PsiField(
            self.grid, self.lattice, self.values, np.zeros_like(self.values),
            periodic_gradient(self.values, self.lattice), provenance="fd",
        )

    def restrict(self, lattice: Lattice, grid: TimeGrid) -> FdSolution:
        """Subsample onto a coarser lattice and time grid."""
        if not math.isclose(grid.horizon, self.grid.horizon) or self.grid.n_steps % grid.n_steps:
            raise FieldMismatchError(f"{self.grid.n_steps} steps do not refine {grid.n_steps}")
        stride = self.grid.n_steps // grid.n_steps
        nodes = self.lattice.subsample(lattice)
        return FdSolution(grid, lattice, self.values[::stride][:, nodes], self.cfl_report, self.scheme)


# ---------------------------------------------------------------------------
# Spatial operator
# ---------------------------------------------------------------------------

def discrete_operator(
    spec: ProblemSpec,
    t: float,
    u: np.ndarray,
    lattice: Lattice,
    grad: np.ndarray | None = None,
    hess: np.ndarray | None = None,
    *,
    include_diagonal_diffusion: bool = True,
) -> np.ndarray:
    """tr(a hess u) + b.grad u + V u + F(u, grad u).grad u + g(u, grad u, hess u) at every node."""
    lattice.require(4, "the finite-difference operator")
    coords = lattice.coords
    if grad is None:
        grad = periodic_gradient(u, lattice)
    if hess is None:
        hess = periodic_hessian(u, lattice)
    a = np.array(spec.diffusion_at(t, coords), dtype=float)
    if not include_diagonal_diffusion:
        idx = np.arange(spec.dim_d)
        a[:, idx, idx] = 0.0
    b = spec.drift_at(t, coords)
    potential = spec.potential_at(t, coords)
    transport = spec.nonlinearity_at(t, coords, u, grad)
    return (
        np.einsum("nij,nijm->nm", a, hess)
        + np.einsum("ni,nim->nm", b, grad)
        + potential[:, None] * u
        + np.einsum("ni,nim->nm", transport, grad)
        + spec.source_at(t, coords, u, grad, hess)
    )


def problem_scale(spec: ProblemSpec, lattice: Lattice) -> float:
    """max(1, max |L u0|), the unit in which residuals are judged."""
    u0 = np.array(spec.initial_at(lattice.coords), dtype=float)
    return max(1.0, float(np.abs(discrete_operator(spec, 0.0, u0, lattice)).max()))


# ---------------------------------------------------------------------------
# Periodic tridiagonal solves
# ---------------------------------------------------------------------------

def solve_periodic_tridiagonal(
    lower: np.ndarray, diag: np.ndarray, upper: np.ndarray, rhs: np.ndarray
) -> np.ndarray:
    """Solve a cyclic tridiagonal system by Sherman-Morrison on top of a banded solve.

    Row ``j`` reads ``lower[j] x[j-1] + diag[j] x[j] + upper[j] x[j+1]``
    with indices wrapping around.
    """
    n = len(diag)
    if n < 3:
        raise ProblemError("cyclic tridiagonal solve needs >= 3 unknowns")
    corner_top = lower[0]
    corner_bottom = upper[-1]
    gamma = -diag[0]
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[1, 0] -= gamma
    ab[1, -1] -= corner_bottom * corner_top / gamma
    ab[2, :-1] = lower[1:]
    correction = np.zeros(n)
    correction[0] = gamma
    correction[-1] = corner_bottom
    rhs2 = rhs.reshape(n, -1)
    solved = solve_banded((1, 1), ab, np.column_stack([rhs2, correction]))
    y, z = solved[:, :-1], solved[:, -1]
    v_dot_y = y[0] + corner_top / gamma * y[-1]
    v_dot_z = z[0] + corner_top / gamma * z[-1]
    return (y - np.outer(z, v_dot_y / (1.0 + v_dot_z))).reshape(rhs.shape)


def _implicit_sweep(u: np.ndarray, coeff: np.ndarray, lattice: Lattice, axis: int) -> np.ndarray:
    """Solve (I - coeff D_axis) u_new = u line by line; coeff = dt a_ii / h^2 per node."""
    grid = lattice.to_grid(u, 0)
    c = lattice.to_grid(coeff[:, None], 0)[..., 0]
    moved = np.moveaxis(grid, axis, -2)
    c_moved = np.moveaxis(c, axis, -1)
    out = np.empty_like(moved)
    for line in np.ndindex(moved.shape[:-2]):
        cl = c_moved[line]
        out[line] = solve_periodic_tridiagonal(-cl, 1.0 + 2.0 * cl, -cl, moved[line])
    return lattice.from_grid(np.moveaxis(out, -2, axis), 0)


# ---------------------------------------------------------------------------
# Time stepping
# ---------------------------------------------------------------------------

def _check_growth(u: np.ndarray, reference: float, t: float) -> None:
    if not np.all(np.isfinite(u)):
        raise InstabilityError(f"non-finite finite-difference values at t={t:.6g}", time=t)
    if np.abs(u).max() > GROWTH_LIMIT * reference:
        raise InstabilityError(f"finite-difference norm growth above {GROWTH_LIMIT:g} at t={t:.6g}", time=t)


def fd_solve(
    spec: ProblemSpec,
    lattice: Lattice,
    grid: TimeGrid,
    scheme: str = "imex-euler",
    cfl: float = 0.4,
) -> FdSolution:
    """March u from u0 across ``grid``; values are stored at every grid knot."""
    if scheme not in SCHEMES:
        raise ProblemError(f"unknown scheme {scheme!r}")
    if lattice.dim != spec.dim_d:
        raise FieldMismatchError(f"lattice dimension {lattice.dim} != problem dimension {spec.dim_d}")
    lattice.require(4, "the finite-difference oracle")
    d = spec.dim_d
    h_min = min(lattice.spacing)
    dt = grid.step_size
    coords = lattice.coords

    u = np.array(spec.initial_at(coords), dtype=float)
    reference = max(1.0, float(np.abs(u).max()))
    values = np.empty((grid.n_slices,) + u.shape)
    values[0] = u

    _, lam_max, _ = ellipticity_bounds(spec, lattice, grid)
    if scheme == "explicit-rk4":
        max_stable = cfl * h_min**2 / (2.0 * lam_max * d)
        substeps = max(1, math.ceil(dt / max_stable - 1e-12))
        h = dt / substeps
        report = CflReport(max_stable, h, substeps)
        for k in range(grid.n_steps):
            t0 = grid.time(k)
            for j in range(substeps):
                t = t0 + j * h
                k1 = discrete_operator(spec, t, u, lattice)
                k2 = discrete_operator(spec, t + h / 2, u + h / 2 * k1, lattice)
                k3 = discrete_operator(spec, t + h / 2, u + h / 2 * k2, lattice)
                k4 = discrete_operator(spec, t + h, u + h * k3, lattice)
                u = u + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            _check_growth(u, reference, grid.time(k + 1))
            values[k + 1] = u
        logger.debug("explicit-rk4: %d substeps of %.3e per step", substeps, h)
        return FdSolution(grid, lattice, values, report, scheme)

    if d == 3:
        raise ProblemError("imex-euler supports d <= 2; use explicit-rk4")
    for t in (0.0, grid.horizon):
        a = spec.diffusion_at(t, coords)
        off = a - a * np.eye(d)
        if np.abs(off).max() > 0:
            raise ProblemError("off-diagonal diffusion needs explicit-rk4")
    speed = max(float(np.abs(spec.drift_at(0.0, coords)).max()), 1e-300)
    report = CflReport(cfl * h_min / speed, dt)
    for k in range(grid.n_steps):
        t_now, t_next = grid.time(k), grid.time(k + 1)
        u = u + dt * discrete_operator(spec, t_now, u, lattice, include_diagonal_diffusion=False)
        a_next = spec.diffusion_at(t_next, coords)
        for axis, hx in enumerate(lattice.spacing):
            u = _implicit_sweep(u, dt * a_next[:, axis, axis] / hx**2, lattice, axis)
        _check_growth(u, reference, t_next)
        values[k + 1] = u
    return FdSolution(grid, lattice, values, report, scheme)


def residual_of(values: np.ndarray, spec: ProblemSpec, lattice: Lattice, grid: TimeGrid) -> float:
    """max |u_t - u_0 - int_0^t (operator u_s) ds| with trapezoid time quadrature."""
    values = np.asarray(values, dtype=float)
    ops = np.stack([
        discrete_operator(spec, grid.time(k), values[k], lattice) for k in range(grid.n_slices)
    ])
    integral = cumulative_trapezoid(ops, x=grid.slice_times, axis=0, initial=0.0)
    return float(np.abs(values - values[0] - integral).max())
