"""Deterministic seeded random streams.

Every random draw in the toolkit flows through a SplitMix64 stream so that
results are reproducible bit-for-bit from a single 64-bit seed, independent
of platform and of how work is scheduled across threads.  Per-point streams
are derived as ``SplitMix64(master_seed XOR point_index)``, which makes
profiling embarrassingly parallel without any shared RNG state.
"""

from __future__ import annotations

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15


class Stream:
    """SplitMix64 generator with uniform/integer helpers."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        """Uniform float64 in [low, high); 53-bit resolution."""
        u = self.next_u64() >> 11
        return low + (high - low) * (u * 2.0**-53)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            u = self.next_u64()
            if u <= limit:
                return u % n

    def sample_without_replacement(self, n_total: int, n_take: int) -> list[int]:
        """Uniform subset of size n_take from range(n_total), in draw order."""
        if n_take > n_total:
            raise ValueError(f"cannot take {n_take} from {n_total}")
        pool = list(range(n_total))
        taken = []
        for i in range(n_take):
            j = i + self.below(n_total - i)
            pool[i], pool[j] = pool[j], pool[i]
            taken.append(pool[i])
        return taken

    def spawn(self) -> "Stream":
        """Independent child stream keyed off the next raw draw."""
        return Stream(self.next_u64())


def point_stream(master_seed: int, point_index: int) -> Stream:
    """Stream for one dataset point: SplitMix64(master_seed XOR point_index)."""
    return Stream((master_seed ^ point_index) & _MASK64)
