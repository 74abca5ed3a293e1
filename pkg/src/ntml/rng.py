"""Seeded random streams.

Every random draw in the package goes through :class:`Rng`.  The bit
generator is numpy's PCG64 (O'Neill's permuted congruential generator,
128-bit state, XSL-RR output), which numpy guarantees to be stable across
releases for a given seed.  Sub-streams are keyed with SplitMix64 so that
``Rng(s).child("poison")`` is the same stream on every machine.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One SplitMix64 finalisation step (Steele, Lea & Flood)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base: int, *keys: int | str) -> int:
    """Mix ``base`` with integer or string keys into a new 64-bit seed."""
    h = splitmix64(int(base) & _MASK64)
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        h = splitmix64(h ^ (int(key) & _MASK64))
    return h


class Rng:
    """A seeded PCG64 stream.

    Identical seeds give identical streams.  Use :meth:`child` to hand
    independent streams to sub-steps instead of sharing one generator.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int):
        if seed < 0 or seed > _MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int | str) -> "Rng":
        return Rng(derive_seed(self.seed, *keys))

    # thin forwards, so callers rarely need ``.gen``
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"
