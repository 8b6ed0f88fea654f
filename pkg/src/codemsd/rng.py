"""Portable seeded random streams (splitmix64 seeding, xoshiro256** generation).

Everything stochastic in the package (initialization, data generation, batch
shuffling) draws from :class:`Rng`, so a run is fully determined by its seed
on every platform.
"""

from __future__ import annotations

import math
from typing import MutableSequence, Sequence, TypeVar

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar("T")


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for ``(seed, key, ...)``, independent of generation order."""
    state = seed & MASK64
    _, out = splitmix64(state)
    for key in keys:
        state, out = splitmix64((out ^ (key & MASK64)) & MASK64)
        state, out = splitmix64(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Rng:
    """xoshiro256** generator with a 256-bit state seeded by splitmix64."""

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        state = self.seed
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s
        self._spare_normal: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased (rejection on the 64-bit range)."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in the closed range [low, high]."""
        return low + self.below(high - low + 1)

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        # Box-Muller; the second variate of each pair is cached.
        if self._spare_normal is not None:
            z = self._spare_normal
            self._spare_normal = None
            return mean + std * z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return mean + std * r * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int, mean: float = 0.0, std: float = 1.0) -> list[float]:
        return [self.normal(mean, std) for _ in range(n)]

    def choice(self, seq: Sequence[T]) -> T:
        return seq[self.below(len(seq))]

    def shuffle(self, items: MutableSequence) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        self.shuffle(idx)
        return idx
