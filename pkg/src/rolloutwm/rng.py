"""Seeded random streams.

Every random draw in the package goes through an :class:`Rng`. Child streams
are derived from the parent seed and a string key, so adding draws in one
component never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _derive(seed: int, key: str) -> int:
    h = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(h[:8], "little")


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys) -> "Rng":
        return Rng(_derive(self.seed, "/".join(str(k) for k in keys)))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        self.counter += 1
        return self._gen.standard_normal(shape).astype(dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size)

    def choice(self, options, size=None):
        self.counter += 1
        idx = self._gen.integers(0, len(options), size)
        if size is None:
            return options[int(idx)]
        return [options[int(i)] for i in np.atleast_1d(idx)]

    def random(self, size=None):
        self.counter += 1
        return self._gen.random(size)
