"""Deterministic counter-based random stream.

The generator is a counter-based splitmix64: draw number ``i`` (0-based,
counted from stream creation) is ``mix64(seed + (i+1) * GAMMA)`` with all
arithmetic modulo 2**64, where ``mix64`` is the splitmix64 finalizer

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

and ``GAMMA = 0x9E3779B97F4A7C15``.  Because the stream is a pure function
of (seed, counter) it reproduces bit-identically across platforms and is
cheap to vectorize.  Integer draws use modulo reduction; the bias is
negligible for the ranges used here (< 2**32) and keeps the stream layout
simple.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK = 0xFFFFFFFFFFFFFFFF


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded stream of uniforms, normals, integers, and permutations."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._counter = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit draws."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(np.uint64(self.seed) + idx * _GAMMA)

    def derive(self, label: str) -> "Rng":
        """Independent child stream named by ``label``.

        The child seed folds the label bytes into the parent seed with the
        same mixer, so the mapping is stable across runs and platforms.
        """
        h = np.uint64(self.seed)
        with np.errstate(over="ignore"):
            h = _mix64(h ^ _GAMMA)
            for byte in label.encode("utf-8"):
                h = _mix64((h + np.uint64(byte)) * _MUL1)
        return Rng(int(h))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.raw(n) >> np.uint64(11)) * (2.0 ** -53)

    def normal(self, shape) -> np.ndarray:
        """Standard normal array via Box-Muller."""
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return out[:n].reshape(shape)

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """``n`` ints uniform on [low, high)."""
        if high <= low:
            raise ValueError("empty integer range")
        span = np.uint64(high - low)
        return (self.raw(n) % span).astype(np.int64) + low

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (stable argsort of raw keys)."""
        return np.argsort(self.raw(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct draws from range(n), order randomized."""
        if k > n:
            raise ValueError("cannot draw more than population size")
        return self.permutation(n)[:k]

    def uniform_init(self, shape, fan_in: int) -> np.ndarray:
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""
        bound = 1.0 / np.sqrt(fan_in)
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        return ((self.uniform(n) * 2.0 - 1.0) * bound).reshape(shape)

    def beta(self, a: float, b: float) -> float:
        """One Beta(a, b) draw (Johnk's rejection algorithm)."""
        while True:
            u, v = self.uniform(2)
            x = u ** (1.0 / a)
            y = v ** (1.0 / b)
            if x + y <= 1.0:
                if x + y > 0.0:
                    return x / (x + y)
                # Underflow corner: fall back to log-scale comparison.
                lx = np.log(max(u, 1e-300)) / a
                ly = np.log(max(v, 1e-300)) / b
                m = max(lx, ly)
                return float(np.exp(lx - m) / (np.exp(lx - m) + np.exp(ly - m)))
