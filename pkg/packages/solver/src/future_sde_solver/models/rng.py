"""Counter-based Gaussian streams for reproducible, schedule-free Monte Carlo.

A stream is addressed by ``(slice, node, channel)``; the Philox key is
derived from the master seed and that address through ``SeedSequence``.
Within a stream every particle owns a fixed block of counter space, and the
normals of a particle are a pure function of their (step, component)
position in that block. Any partition of the particle range therefore
produces identical numbers, which is what makes results independent of the
worker count and lets Picard iterations reuse common random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BROWNIAN = 0
PROBE = 1

_WORDS_PER_BLOCK = 4
_UNIT = 2.0**-53


@dataclass(frozen=True)
class RngStream:
    seed: int

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    def key(self, slice_index: int, node_index: int, channel: int = BROWNIAN) -> np.ndarray:
        sequence = np.random.SeedSequence(self.seed, spawn_key=(slice_index, node_index, channel))
        return sequence.generate_state(2, dtype=np.uint64)

    def normals(
        self,
        slice_index: int,
        node_index: int,
        n_steps: int,
        dim: int,
        particles: tuple[int, int],
        channel: int = BROWNIAN,
    ) -> np.ndarray:
        """Standard normals of shape ``(stop - start, n_steps, dim)``."""
        start, stop = particles
        count = stop - start
        if count < 0:
            raise ValueError(f"empty particle range {particles}")
        needed = 2 * n_steps * dim
        blocks = -(-needed // _WORDS_PER_BLOCK) if needed else 0
        if count == 0 or needed == 0:
            return np.zeros((count, n_steps, dim))
        words = blocks * _WORDS_PER_BLOCK
        generator = np.random.Philox(
            key=self.key(slice_index, node_index, channel),
            counter=start * blocks,
        )
        raw = generator.random_raw(count * words).reshape(count, words)[:, :needed]
        uniform = (raw >> np.uint64(11)).astype(np.float64) * _UNIT
        radius = np.sqrt(-2.0 * np.log1p(-uniform[:, 0::2]))
        angle = 2.0 * np.pi * uniform[:, 1::2]
        return (radius * np.cos(angle)).reshape(count, n_steps, dim)
