"""Seedable splitmix64 stream.

splitmix64 is counter based: the i-th output is ``mix(seed + i * GAMMA)``, so
bulk draws vectorize in numpy and stay identical to a scalar loop written in
any other language.

Derived quantities:

* uniform float in [0, 1): ``(x >> 11) * 2**-53``
* integer in [0, n): ``floor(u * n)``
* exponential(1): ``-log(1 - u)``
* normal(0, 1): Box-Muller on two consecutive uniforms (cos branch only)
* permutation of n: stable argsort of n raw 64-bit draws
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB

_GAMMA_U = np.uint64(GAMMA)
_M1_U = np.uint64(_M1)
_M2_U = np.uint64(_M2)


def mix64(z: int) -> int:
    """splitmix64 finalizer on a python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1_U
    z = (z ^ (z >> np.uint64(27))) * _M2_U
    return z ^ (z >> np.uint64(31))


def stable_mix(*keys: int) -> int:
    """Hash a tuple of integers to one 64-bit seed, independent of call order elsewhere."""
    h = 0x5EED5EED5EED5EED
    for k in keys:
        h = mix64(h ^ mix64((int(k) + GAMMA) & MASK64))
    return h


class Rng:
    """splitmix64 generator. Identical seed gives identical stream."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self):
        return f"Rng(state={self.state:#018x})"

    def copy(self) -> "Rng":
        return Rng(self.state)

    def spawn(self, *keys: int) -> "Rng":
        """Child generator keyed by ``keys``; does not advance this stream."""
        return Rng(stable_mix(self.state, *keys))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError(f"negative draw count {n}")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * _GAMMA_U
            out = _mix_array(np.uint64(self.state) + steps)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random(self, size=None):
        """Uniform floats in [0, 1)."""
        if size is None:
            return (self.next_u64() >> 11) * 2.0 ** -53
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        return ((self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Integers in [low, high); with one argument, in [0, low)."""
        if high is None:
            low, high = 0, low
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        span = high - low
        if size is None:
            return low + min(int(self.random() * span), span - 1)
        u = self.random(size)
        return low + np.minimum((u * span).astype(np.int64), span - 1)

    def exponential(self, size=None):
        return -np.log1p(-self.random(size))

    def normal(self, loc=0.0, scale=1.0, size=None):
        shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
        n = int(np.prod(shape, dtype=np.int64))
        u = self.random(2 * n).reshape(2, n)
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        z = loc + scale * z
        return float(z[0]) if size is None else z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), uniformly, in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n} without replacement")
        return self.permutation(n)[:k]
