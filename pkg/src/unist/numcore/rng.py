"""Seeded random source for parameter init and procedural data."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class Rng:
    """Deterministic generator: numpy's PCG64 bit generator seeded with a u64.

    PCG64 streams are specified bit-for-bit by numpy, so a given seed yields the
    same draws on every platform.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(seed))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None):
        """Uniform integers in [low, high]."""
        return self._gen.integers(low, high, size=shape, endpoint=True)

    def choice(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; the same key always gives the same child."""
        return Rng((self.seed * 6364136223846793005 + 1442695040888963407 + key) % 2**64)


def init_uniform(rng: Rng, shape, fan_in: int, requires_grad: bool = True, gain: float = 1.0) -> Tensor:
    """Uniform(-gain/sqrt(fan_in), gain/sqrt(fan_in)) weights; gain sqrt(6) is He init."""
    bound = gain / math.sqrt(fan_in)
    return Tensor(rng.uniform(shape, -bound, bound), requires_grad=requires_grad)
