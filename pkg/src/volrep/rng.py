"""Deterministic random number generation.

Implements PCG32 (the PCG XSH-RR 64/32 generator) in pure integer
arithmetic so that a given (seed, stream) pair produces the same draw
sequence on every platform and numpy version. The full generator state
is three unsigned 64-bit integers, which makes it trivial to embed in
checkpoint files and restore bit-exactly.
"""

import math

import numpy as np

_MULT = 6364136223846793005
_U64 = (1 << 64) - 1
_INV32 = 2.0 ** -32


class Rng:
    """PCG32 stream with an explicit sub-stream selector.

    Streams with distinct `stream` values are statistically independent,
    so independent consumers (model init, batch sampling, per-sample
    generation) can share one seed without draw-order coupling.
    """

    __slots__ = ("seed", "stream", "_state", "_inc")

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _U64
        self.stream = int(stream) & _U64
        self._inc = ((self.stream << 1) | 1) & _U64
        self._state = 0
        self.next_u32()
        self._state = (self._state + self.seed) & _U64
        self.next_u32()

    def next_u32(self) -> int:
        old = self._state
        self._state = (old * _MULT + self._inc) & _U64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def uniform(self, n: int) -> np.ndarray:
        """n draws in [0, 1) as float64."""
        if n < 0:
            raise ValueError(f"draw count must be >= 0, got {n}")
        out = np.empty(n, dtype=np.float64)
        nxt = self.next_u32
        for i in range(n):
            out[i] = nxt() * _INV32
        return out

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """n standard-normal draws via Box-Muller, scaled to (mean, std)."""
        pairs = (n + 1) // 2
        out = np.empty(2 * pairs, dtype=np.float64)
        nxt = self.next_u32
        for i in range(pairs):
            u1 = (nxt() + 1) * _INV32  # in (0, 1], keeps log() finite
            u2 = nxt() * _INV32
            r = math.sqrt(-2.0 * math.log(u1))
            out[2 * i] = r * math.cos(2.0 * math.pi * u2)
            out[2 * i + 1] = r * math.sin(2.0 * math.pi * u2)
        return mean + std * out[:n]

    def below(self, bound: int) -> int:
        """Integer in [0, bound) via Lemire's multiply-shift reduction."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        return (self.next_u32() * bound) >> 32

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def subset(self, n: int, k: int) -> np.ndarray:
        """Uniform k-subset of range(n) without replacement, sorted ascending."""
        if not 0 <= k <= n:
            raise ValueError(f"need 0 <= k <= n, got k={k} n={n}")
        chosen = self.permutation(n)[:k]
        chosen.sort()
        return chosen

    def state(self) -> tuple:
        return (self.seed, self.stream, self._state)

    @classmethod
    def restore(cls, seed: int, stream: int, state: int) -> "Rng":
        rng = cls(seed, stream)
        rng._state = int(state) & _U64
        return rng
