"""SplitMix64 pseudo-random generator, vectorized with numpy.

Output ``i`` (1-based) of a stream seeded with ``s`` is ``mix(s + i * GAMMA)``,
so a block of draws is a single array expression and the stream is identical
on every platform. Gaussian draws use Box-Muller on consecutive uniform pairs.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a sub-stream, e.g. one scene of a dataset."""
    s = np.array([seed & _MASK], dtype=np.uint64)
    for k in keys:
        with np.errstate(over="ignore"):
            s = _mix(s ^ _mix(np.array([(k + 1) & _MASK], dtype=np.uint64) * GAMMA))
    return int(s[0])


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * GAMMA
        self.state = (self.state + n * int(GAMMA)) & _MASK
        return _mix(z)

    def random(self, shape=()) -> np.ndarray | float:
        """Uniform doubles in [0, 1) with 53 bits of resolution."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if shape == () else u.reshape(shape)

    def uniform(self, low: float, high: float, shape=()):
        return low + (high - low) * self.random(shape)

    def normal(self, loc: float = 0.0, scale: float = 1.0, shape=()):
        n = int(np.prod(shape, dtype=np.int64))
        u = self.random((2, n)) if n else np.zeros((2, 0))
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        z = loc + scale * z
        return float(z[0]) if shape == () else z.reshape(shape)

    def integers(self, low: int, high: int, shape=()):
        """Integers in [low, high)."""
        span = high - low
        v = low + np.floor(self.random(shape if shape != () else (1,)) * span).astype(np.int64)
        v = np.minimum(v, high - 1)
        return int(v[0]) if shape == () else v

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
