"""Seeded splitmix64 generator; every random draw in the package goes through it."""
from __future__ import annotations

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from ints/strings (no use of Python's salted hash)."""
    h = 0x243F6A8885A308D3
    for part in parts:
        data = str(part).encode("utf-8") if not isinstance(part, int) else part.to_bytes(16, "little", signed=True)
        for byte in data:
            h = _mix((h ^ byte) + _GAMMA & _MASK)
        h = _mix(h + _GAMMA & _MASK)
    return h


class Prng:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        start = self.state
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(start) + steps * np.uint64(_GAMMA)
        self.state = (start + n * _GAMMA) & _MASK
        return _mix_array(z)

    def random(self, size=None):
        """Uniform floats in [0, 1)."""
        if size is None:
            return (self.next_u64() >> 11) * (1.0 / (1 << 53))
        n = int(np.prod(size))
        vals = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return vals.reshape(size)

    def uniform(self, lo: float, hi: float, size=None):
        return lo + (hi - lo) * self.random(size)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi)."""
        if hi <= lo:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + self.next_u64() % (hi - lo)

    def choice(self, seq):
        return seq[self.randint(0, len(seq))]

    def shuffle(self, items: list) -> list:
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def spawn(self, *key) -> "Prng":
        """Independent child stream keyed by ``key``; does not advance self."""
        return Prng(derive_seed(self.state, *key))
