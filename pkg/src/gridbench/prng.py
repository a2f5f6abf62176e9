"""Deterministic 64-bit PRNG used everywhere randomness is needed.

The generator is the SplitMix64 recurrence: a stream holds a 64-bit state,
each draw advances the state by a fixed odd constant and feeds it through a
mixing finalizer.  Streams are derived hierarchically from a root seed plus
integer/string context fields, so any sample, shuffle or weight draw is a
pure function of (seed, context) and reproduces bit-exactly on every
platform without touching ``random`` or ``numpy.random``.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 2^-53, scales a 53-bit integer into [0, 1)
_FLOAT_SCALE = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    """SplitMix64 finalizer: avalanche a 64-bit value."""
    z &= MASK
    z = ((z ^ (z >> 30)) * _MIX1) & MASK
    z = ((z ^ (z >> 27)) * _MIX2) & MASK
    return z ^ (z >> 31)


def _encode_field(field) -> int:
    """Map a context field (int or str) to a 64-bit value."""
    if isinstance(field, bool):
        raise TypeError("bool is not a valid stream context field")
    if isinstance(field, int):
        return field & MASK
    if isinstance(field, str):
        # FNV-1a over UTF-8 bytes, then avalanched.
        h = 0xCBF29CE484222325
        for b in field.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & MASK
        return mix64(h)
    raise TypeError(f"unsupported stream context field type: {type(field)!r}")


def derive(seed: int, *fields) -> int:
    """Derive a stream key from a root seed and context fields.

    Deterministic, order-sensitive folding: each field is encoded to 64 bits
    and absorbed through the mixing finalizer.
    """
    h = mix64((seed & MASK) ^ GOLDEN)
    for field in fields:
        h = mix64((h + GOLDEN) ^ _encode_field(field))
    return h


def _finalize_array(states: np.ndarray) -> np.ndarray:
    z = states.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class Stream:
    """Sequential SplitMix64 draw stream for a derived key.

    Draw i (0-based) equals ``mix64(key + (i+1)*GOLDEN)``, so scalar and
    vectorized paths produce identical values for identical positions.
    """

    def __init__(self, key: int):
        self._key = key & MASK
        self._pos = 0

    def u64(self) -> int:
        self._pos += 1
        return mix64((self._key + self._pos * GOLDEN) & MASK)

    def u64s(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        states = np.uint64(self._key) + idx * np.uint64(GOLDEN)
        return _finalize_array(states)

    def float(self) -> float:
        return (self.u64() >> 11) * _FLOAT_SCALE

    def floats(self, n: int) -> np.ndarray:
        return (self.u64s(n) >> np.uint64(11)).astype(np.float64) * _FLOAT_SCALE

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.float()

    def below(self, bound: int) -> int:
        """Integer in [0, bound) as floor(u * bound); bound must be positive."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        v = int(self.float() * bound)
        return min(v, bound - 1)

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller; consumes 2*ceil(n/2) draws."""
        m = (n + 1) // 2
        u1 = self.floats(m)
        u2 = self.floats(m)
        # guard log(0)
        u1 = np.maximum(u1, _FLOAT_SCALE)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): argsort of n raw draws."""
        if n == 0:
            return np.empty(0, dtype=np.int64)
        return np.argsort(self.u64s(n), kind="stable").astype(np.int64)

    def shuffled(self, values) -> list:
        arr = list(values)
        return [arr[i] for i in self.permutation(len(arr))]
