"""Portable seeded generator for every decision that must reproduce exactly.

SplitMix64 (Steele, Lea & Flood 2014) with its published constants. Integers
below ``n`` come from bitmask rejection sampling so the
stream is identical in any language that does 64-bit unsigned arithmetic.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX_1) & MASK64
        z = ((z ^ (z >> 27)) * MIX_2) & MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection sampling."""
        if n < 1:
            raise ValueError("below() needs n >= 1")
        if n == 1:
            return 0
        bits = (n - 1).bit_length()
        while True:
            r = self.next_u64() >> (64 - bits)
            if r < n:
                return r

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``, swapping from the back."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def derive_seed(seed: int, *labels: str | int) -> int:
    """Independent sub-seed for a named consumer, so adding consumers never shifts others."""
    g = SplitMix64(seed)
    acc = g.next_u64()
    for label in labels:
        for byte in str(label).encode("utf-8"):
            acc = SplitMix64(acc ^ byte).next_u64()
        acc = SplitMix64(acc ^ 0xFF).next_u64()
    return acc
