"""Seeded xoshiro256** generator.

Every random draw in the package (weight init, synthetic data, shuffles,
augmentation, head selection) goes through :class:`Xoshiro256`, so a run is
fully determined by its integer seed. The state is four 64-bit words and can
be saved in a checkpoint and restored exactly.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from numba import njit

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from arbitrary printable parts (seed, sample id, epoch...)."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


@njit(cache=True)
def _fill(s, out):
    # s: uint64[4] state, advanced in place; out: uint64 buffer
    for k in range(out.shape[0]):
        s0 = s[0]
        s1 = s[1]
        s2 = s[2]
        s3 = s[3]
        x = s1 * np.uint64(5)
        x = (x << np.uint64(7)) | (x >> np.uint64(57))
        out[k] = x * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
        s[0] = s0
        s[1] = s1
        s[2] = s2
        s[3] = s3


class Xoshiro256:
    """xoshiro256** with numpy-shaped convenience draws."""

    def __init__(self, seed: int = 0):
        x = int(seed) & _MASK
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)

    # -- state -------------------------------------------------------------
    @property
    def state(self) -> list[int]:
        return [int(w) for w in self._s]

    @state.setter
    def state(self, words) -> None:
        words = [int(w) & _MASK for w in words]
        if len(words) != 4 or not any(words):
            raise ValueError("xoshiro256 state must be four words, not all zero")
        self._s = np.array(words, dtype=np.uint64)

    # -- raw output --------------------------------------------------------
    def next_u64(self, n: int | None = None):
        out = np.empty(1 if n is None else int(n), dtype=np.uint64)
        _fill(self._s, out)
        return int(out[0]) if n is None else out

    # -- derived draws -----------------------------------------------------
    def random(self, size=None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, loc=0.0, scale=1.0, size=None):
        """Box-Muller; consumes two uniforms per output value."""
        n = 1 if size is None else int(np.prod(size))
        u = self.random(2 * n)
        u1 = 1.0 - u[:n]  # (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u[n:])
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None):
        """Integers in [0, high) by multiply-shift on the top 32 bits."""
        if high <= 0:
            raise ValueError("high must be positive")
        n = 1 if size is None else int(np.prod(size))
        top = (self.next_u64(n) >> np.uint64(32)).astype(np.float64)
        v = np.floor(top * high / 4294967296.0).astype(np.int64)
        return int(v[0]) if size is None else v.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_bool(self, p: float) -> bool:
        return self.random() < p
