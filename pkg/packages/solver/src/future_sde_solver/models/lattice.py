"""Time grids, periodic space lattices and the stencils defined on them.

Fields are stored node-flattened: a field with ``k`` channels on a lattice
with ``n_nodes`` nodes has trailing shape ``(n_nodes, k)``. Leading axes
(time slices, batches) are carried through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from future_sde_solver.models.errors import LatticeError, ProblemError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform knots ``k * T / n`` on ``[0, T]``."""

    horizon: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise ProblemError(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise ProblemError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def step_size(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_slices(self) -> int:
        return self.n_steps + 1

    def time(self, k: int) -> float:
        if k == self.n_steps:
            return float(self.horizon)
        return k * self.horizon / self.n_steps

    @cached_property
    def slice_times(self) -> np.ndarray:
        times = np.arange(self.n_slices) * self.horizon / self.n_steps
        times[-1] = self.horizon
        return times

    def nearest_index(self, t: float) -> int:
        """Index of the knot closest to ``t`` (clipped to the grid)."""
        k = int(round(t / self.step_size))
        return min(max(k, 0), self.n_steps)


@dataclass(frozen=True)
class Lattice:
    """Regular lattice on the unit torus, node ``i`` of an axis at ``i / n``."""

    nodes_per_axis: tuple[int, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.nodes_per_axis) <= 3:
            raise ProblemError(f"lattice dimension must be 1-3, got {len(self.nodes_per_axis)}")
        if any(n < 1 for n in self.nodes_per_axis):
            raise LatticeError(f"empty lattice axis in {self.nodes_per_axis}")

    @classmethod
    def uniform(cls, dim: int, nodes: int) -> Lattice:
        return cls((nodes,) * dim)

    @property
    def dim(self) -> int:
        return len(self.nodes_per_axis)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes_per_axis

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / n for n in self.nodes_per_axis)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, d)``, C order over axes."""
        axes = [np.arange(n) / n for n in self.nodes_per_axis]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def require(self, minimum: int, purpose: str) -> None:
        if min(self.nodes_per_axis) < minimum:
            raise LatticeError(
                f"{purpose} needs >= {minimum} nodes per axis, lattice has {self.nodes_per_axis}"
            )

    def to_grid(self, values: np.ndarray, lead: int) -> np.ndarray:
        """Unflatten the node axis found after ``lead`` leading axes."""
        head = values.shape[:lead]
        tail = values.shape[lead + 1:]
        return values.reshape(head + self.shape + tail)

    def from_grid(self, values: np.ndarray, lead: int) -> np.ndarray:
        head = values.shape[:lead]
        tail = values.shape[lead + self.dim:]
        return values.reshape(head + (self.n_nodes,) + tail)

    def subsample(self, coarse: Lattice) -> np.ndarray:
        """Flat indices of this lattice's nodes that coincide with ``coarse`` nodes."""
        if coarse.dim != self.dim:
            raise LatticeError("cannot subsample across dimensions")
        steps = []
        for fine_n, coarse_n in zip(self.nodes_per_axis, coarse.nodes_per_axis):
            if fine_n % coarse_n:
                raise LatticeError(f"{fine_n} nodes do not refine {coarse_n}")
            steps.append(np.arange(coarse_n) * (fine_n // coarse_n))
        mesh = np.meshgrid(*steps, indexing="ij")
        return np.ravel_multi_index(tuple(m.reshape(-1) for m in mesh), self.shape)


# ---------------------------------------------------------------------------
# Periodic stencils
# ---------------------------------------------------------------------------

def periodic_gradient(values: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Central first differences with periodic wrap.

    ``values`` has shape ``(..., n_nodes, m)``; the result has shape
    ``(..., n_nodes, d, m)``.
    """
    lattice.require(3, "central differencing")
    lead = values.ndim - 2
    grid = lattice.to_grid(values, lead)
    parts = []
    for axis, h in enumerate(lattice.spacing):
        ax = lead + axis
        diff = (np.roll(grid, -1, axis=ax) - np.roll(grid, 1, axis=ax)) / (2.0 * h)
        parts.append(lattice.from_grid(diff, lead))
    return np.stack(parts, axis=-2)


def periodic_hessian(values: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Central second differences with periodic wrap.

    ``values`` has shape ``(..., n_nodes, m)``; the result has shape
    ``(..., n_nodes, d, d, m)`` and is symmetric in the two middle axes.
    """
    lattice.require(3, "second differencing")
    lead = values.ndim - 2
    grid = lattice.to_grid(values, lead)
    d = lattice.dim
    out = np.empty(values.shape[:-1] + (d, d) + values.shape[-1:], dtype=float)
    for i, hi in enumerate(lattice.spacing):
        ai = lead + i
        second = (np.roll(grid, -1, axis=ai) - 2.0 * grid + np.roll(grid, 1, axis=ai)) / hi**2
        out[..., i, i, :] = lattice.from_grid(second, lead)
        for j in range(i + 1, d):
            hj = lattice.spacing[j]
            aj = lead + j
            plus = np.roll(grid, -1, axis=ai)
            minus = np.roll(grid, 1, axis=ai)
            mixed = (
                np.roll(plus, -1, axis=aj) - np.roll(plus, 1, axis=aj)
                - np.roll(minus, -1, axis=aj) + np.roll(minus, 1, axis=aj)
            ) / (4.0 * hi * hj)
            flat = lattice.from_grid(mixed, lead)
            out[..., i, j, :] = flat
            out[..., j, i, :] = flat
    return out


def interpolate(values: np.ndarray, lattice: Lattice, points: np.ndarray) -> np.ndarray:
    """Periodic multilinear interpolation of a lattice field.

    ``values`` has shape ``(n_nodes, k)``, ``points`` has shape ``(..., d)``
    in unwrapped coordinates; returns ``(..., k)``.
    """
    grid = lattice.to_grid(values, 0)
    pts = np.mod(points, 1.0).reshape(-1, lattice.dim)
    index_coords = (pts * np.asarray(lattice.nodes_per_axis, dtype=float)).T
    channels = [
        ndimage.map_coordinates(grid[..., c], index_coords, order=1, mode="grid-wrap")
        for c in range(values.shape[-1])
    ]
    return np.stack(channels, axis=-1).reshape(points.shape[:-1] + (values.shape[-1],))
