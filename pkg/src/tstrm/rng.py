"""Portable pseudo-random numbers for the synthetic corpus.

xoshiro256** (Blackman & Vigna) seeded by expanding a 64-bit seed through
SplitMix64. Derived quantities:

* uniform double: ``(next_u64() >> 11) * 2**-53`` in [0, 1)
* integer in [lo, hi]: ``lo + floor(uniform * (hi - lo + 1))``
* standard normal: Box-Muller on ``u1 = 1 - uniform``, ``u2 = uniform``;
  the cosine branch is returned first, the sine branch on the next call.

Everything is plain integer arithmetic modulo 2**64, so a port to any
language reproduces the corpus bit for bit.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** generator."""

    def __init__(self, seed: int | None = None, state: tuple[int, int, int, int] | None = None):
        if state is not None:
            self.s = [v & MASK64 for v in state]
        else:
            sm = SplitMix64(0 if seed is None else seed)
            self.s = [sm.next_u64() for _ in range(4)]
        if not any(self.s):
            raise ValueError("xoshiro256** state must not be all zero")
        self._spare: float | None = None

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + int(self.uniform() * (hi - lo + 1))

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def normals(self, n: int) -> list[float]:
        return [self.normal() for _ in range(n)]


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a sub-stream (for example one per utterance)."""
    sm = SplitMix64(seed)
    value = sm.next_u64()
    for p in path:
        sm = SplitMix64(value ^ (p & MASK64))
        value = sm.next_u64()
    return value
