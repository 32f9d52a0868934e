"""Deterministic random numbers: splitmix64 seeding feeding xoshiro256++.

Scalar draws run on a single pure-Python generator. Bulk draws (parameter
initialisation) seed a bank of independent xoshiro256++ lanes from the scalar
stream and step them in lockstep with numpy, so results are identical on every
platform and independent of numpy's own generators.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_LANES = 4096


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns (new_state, output)."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _rotl_np(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


def _bulk_u64(seed: int, n: int) -> np.ndarray:
    lanes = min(n, _LANES)
    sm = seed
    words = []
    for _ in range(4 * lanes):
        sm, out = splitmix64(sm)
        words.append(out)
    s = np.array(words, dtype=np.uint64).reshape(lanes, 4).T.copy()
    s0, s1, s2, s3 = s
    steps = -(-n // lanes)
    out = np.empty((steps, lanes), dtype=np.uint64)
    for i in range(steps):
        out[i] = _rotl_np(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl_np(s3, 45)
    return out.reshape(-1)[:n]


class Rng:
    """xoshiro256++ generator seeded through splitmix64."""

    def __init__(self, seed: int):
        sm = int(seed) & MASK64
        state = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            state.append(out)
        self.s = state

    @classmethod
    def from_state(cls, state: list[int]) -> "Rng":
        rng = cls.__new__(cls)
        rng.s = [int(v) & MASK64 for v in state]
        return rng

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high) by rejection (no modulo bias)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            v = self.next_u64()
            if v < limit:
                return low + v % span

    def choice_without_replacement(self, n: int, k: int) -> list[int]:
        pool = list(range(n))
        for i in range(k):
            j = self.randint(i, n)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def spawn(self) -> "Rng":
        """Independent child generator (consumes one draw)."""
        return Rng(self.next_u64())

    def uniform_array(self, n: int) -> np.ndarray:
        u = _bulk_u64(self.next_u64(), n)
        return (u >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        shape = tuple(shape)
        n = math.prod(shape)
        if n == 0:
            return np.zeros(shape)
        u = self.uniform_array(2 * n).reshape(2, n)
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        return (z * std).reshape(shape)

    def truncated_normal(self, shape, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal draws restricted to |z| <= bound standard deviations, by redrawing."""
        shape = tuple(shape)
        z = self.normal((math.prod(shape),))
        bad = np.flatnonzero(np.abs(z) > bound)
        while bad.size:
            z[bad] = self.normal((bad.size,))
            bad = bad[np.abs(z[bad]) > bound]
        return (z * std).reshape(shape)
