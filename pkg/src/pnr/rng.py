"""SplitMix64 random numbers, reproducible bit-for-bit in any language.

The k-th output (k = 1, 2, ...) for a 64-bit seed ``s`` is, with all
arithmetic modulo 2**64::

    z = s + k * 0x9E3779B97F4A7C15
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)

Derived draws:

* uniform in [0, 1): ``(out >> 11) * 2**-53``
* standard normal: Box-Muller on consecutive uniform pairs (u1, u2),
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``; one output per pair
* Bernoulli(p): ``uniform < p``
* k-subset without replacement: the indices of the k smallest uniforms
  (stable order), returned sorted
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed, *tags):
    """Deterministically derive an independent 64-bit seed from ``seed`` and integer tags."""
    s = int(seed) & _MASK64
    for t in tags:
        s = int(SplitMix64(s ^ (int(t) & _MASK64)).next_u64(1)[0])
    return s


class SplitMix64:
    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n):
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + k * _GOLDEN)

    def uniform(self, size=None, low=0.0, high=1.0):
        shape = () if size is None else np.atleast_1d(size)
        n = int(np.prod(shape)) if size is not None else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(tuple(shape))

    def normal(self, size=None, scale=1.0):
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape)) if size is not None else 1
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        z = scale * z
        return float(z[0]) if size is None else z.reshape(shape)

    def bernoulli(self, n, p):
        return (self.uniform(n) < p).astype(np.float64)

    def integers(self, high, size=None):
        """Uniform integers in [0, high) via floor(u * high)."""
        n = 1 if size is None else int(size)
        r = np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)
        return int(r[0]) if size is None else r

    def choose(self, n, k):
        """Sorted k-subset of range(n), without replacement."""
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        order = np.argsort(self.uniform(n), kind="stable")
        return np.sort(order[:k])

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")
