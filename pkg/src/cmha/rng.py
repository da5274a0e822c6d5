"""Deterministic pseudo-random numbers for every seeded component.

The generator is a 64-bit xorshift* with fixed constants (shifts 12/25/27,
multiplier 0x2545F4914F6CDD1D), seeded through one splitmix64 scramble.  Any
implementation that follows the same recipe reproduces the exact streams, so
synthetic scenes and weight initialisation are portable across languages.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_XORSHIFT_MULT = 0x2545F4914F6CDD1D


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state once, returning (new_state, output)."""
    state = (state + _SPLITMIX_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, salt: int) -> int:
    """Mix a base seed with a salt into the seed of an independent stream."""
    _, a = splitmix64(seed & _MASK64)
    _, b = splitmix64((salt & _MASK64) ^ 0xA5A5A5A5A5A5A5A5)
    _, out = splitmix64(a ^ b)
    return out


class Xorshift64Star:
    """xorshift64* stream; uniform doubles take the top 53 output bits."""

    def __init__(self, seed: int):
        _, state = splitmix64(seed & _MASK64)
        # the xorshift recurrence fixes 0, so fall back to the scramble gamma
        self._state = state or _SPLITMIX_GAMMA
        self._spare_gaussian: float | None = None

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self._state = x
        return (x * _XORSHIFT_MULT) & _MASK64

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def below(self, n: int) -> int:
        """Integer in [0, n) via the multiply-shift reduction."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def gaussian(self) -> float:
        """Standard normal via Box-Muller; the paired draw is cached."""
        if self._spare_gaussian is not None:
            z = self._spare_gaussian
            self._spare_gaussian = None
            return z
        # 1 - u lies in (0, 1], keeping the log argument strictly positive
        r = math.sqrt(-2.0 * math.log(1.0 - self.uniform()))
        theta = 2.0 * math.pi * self.uniform()
        self._spare_gaussian = r * math.sin(theta)
        return r * math.cos(theta)

    def gaussians(self, count: int) -> list[float]:
        return [self.gaussian() for _ in range(count)]

    def uniforms(self, count: int) -> list[float]:
        return [self.uniform() for _ in range(count)]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def unit_vector3(self) -> tuple[float, float, float]:
        """Uniform direction on the unit sphere."""
        while True:
            x, y, z = self.gaussian(), self.gaussian(), self.gaussian()
            n = math.sqrt(x * x + y * y + z * z)
            if n > 1e-12:
                return x / n, y / n, z / n
