"""Deterministic, platform-independent random number generation.

The generator is SplitMix64 used in counter mode: the ``i``-th raw output is
``mix64(seed + (i + 1) * GOLDEN)`` where ``mix64`` is the standard SplitMix64
finalizer and ``GOLDEN`` is 2**64 / phi rounded to odd. Every draw therefore
depends only on ``(seed, counter)``; integer arithmetic is exact, and uniform
doubles are built from the top 53 bits, so identical seeds yield identical
streams on every platform. All stochastic behaviour in this package (weight
init, data synthesis, augmentation, batch sampling, shuffling) flows through
one of these streams.
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded counter-based generator (SplitMix64)."""

    def __init__(self, seed: int):
        self._seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def derive(self, salt: int) -> "Rng":
        """Independent child stream; used to give workers their own streams."""
        salted = _mix64(np.uint64((salt + 1) & 0xFFFFFFFFFFFFFFFF) * _GOLDEN)
        return Rng(int(self._seed ^ salted))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._seed + idx * _GOLDEN)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform float64 in [low, high); scalar when size is None."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        out = low + u * (high - low)
        return float(out[0]) if size is None else out.reshape(size)

    def random(self) -> float:
        return self.uniform()

    def randint(self, n: int) -> int:
        """Integer in [0, n). Uses modulo reduction; bias is < 2**-32 for the
        desk-scale ranges used here and determinism is what matters."""
        if n <= 0:
            raise ValueError("randint() requires n >= 1")
        return int(self._raw(1)[0] % np.uint64(n))

    def coin(self) -> bool:
        return bool(self._raw(1)[0] & np.uint64(1))

    def shuffle(self, seq):
        """Fisher-Yates; returns a new list, input untouched."""
        items = list(seq)
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def he_uniform(self, shape, fan_in: int) -> np.ndarray:
        """Kaiming-style uniform init, scaled by incoming connections."""
        limit = float(np.sqrt(6.0 / max(1, fan_in)))
        return self.uniform(size=shape, low=-limit, high=limit)
