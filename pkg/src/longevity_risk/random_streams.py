"""Addressable random streams for order-independent Monte Carlo.

A stream is identified by a root seed and an integer key path. Every
simulation unit (a block of realizations, a scenario's trend noise, a drift
draw) derives its own Philox generator from its address, so results do not
depend on how work is split across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

# first element of every key path; keeps the address families disjoint
LIVES = 1
SCENARIO = 2
TREND = 3
DRIFT = 4
PICK = 5

_OPEN_SCALE = 2.0**-52


@dataclass(frozen=True)
class RandomStream:
    """Immutable address of a counter-based random stream."""

    seed: int
    key: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError(f"Seed must be non-negative, got {self.seed}")
        if any(k < 0 for k in self.key):
            raise ValueError(f"Stream key entries must be non-negative: {self.key}")

    def substream(self, *key: int) -> RandomStream:
        """Address of an independent child stream."""
        return RandomStream(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(sequence))

    def uniforms(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self.generator().random(size)

    def open_uniforms(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Uniform draws strictly inside (0, 1), on a 2**-52 midpoint lattice."""
        bits = self.generator().integers(0, 2**52, size=size, dtype=np.uint64)
        return (bits.astype(np.float64) + 0.5) * _OPEN_SCALE

    def normals(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Standard normal draws obtained by inverting the Gaussian CDF."""
        return inverse_normal_cdf(self.open_uniforms(size))


def inverse_normal_cdf(u: np.ndarray | float) -> np.ndarray:
    """Gaussian quantile function; -inf/+inf at 0/1."""
    return ndtri(np.asarray(u, dtype=np.float64))
