"""Deterministic counter-based random number generation.

Every stochastic component in the engine (initialization, data generation,
dropout, probe trials) draws from an `Rng`. The generator is Philox-based,
so streams are reproducible bit-for-bit across platforms and can be split
into independent child streams without sharing mutable state between
workers.
"""

from __future__ import annotations

import numpy as np

_PHILOX_STREAM_SPACE = (1 << 64) - 59  # large prime < 2^64 keeps stream keys distinct


class Rng:
    """Seeded random stream with deterministic child-stream derivation.

    The same (seed, stream) pair always yields the same draw sequence.
    A parent is single-owner: share work across threads by handing each
    worker its own `child(i)`, never the parent itself.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=self._key()))

    def _key(self) -> int:
        # 256-bit Philox key from (seed, stream); mixing keeps child streams
        # distinct even for adjacent seeds.
        return (self.seed & 0xFFFFFFFFFFFFFFFF) + ((self.stream % _PHILOX_STREAM_SPACE) << 64)

    def child(self, index: int) -> "Rng":
        """Derive an independent stream; deterministic in (seed, path)."""
        return Rng(self.seed, self.stream * 1_000_003 + index + 1)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size=shape) * std

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high], endpoints inclusive."""
        return self._gen.integers(low, high, size=shape, endpoint=True)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self._gen.random(size=shape) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def one_of(self, n: int) -> int:
        return int(self._gen.integers(0, n))
