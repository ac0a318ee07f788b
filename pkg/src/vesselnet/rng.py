"""Counter-based random streams with hierarchical keys.

Every stream is a Philox generator keyed by ``(seed, path)``.  Splitting
never consumes draws from the parent, so a layer's dropout mask does not
depend on how many numbers some other layer pulled first.
"""

import hashlib

import numpy as np


def _key_int(key):
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("split keys must be non-negative")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic random stream identified by a seed and a key path."""

    def __init__(self, seed, path=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        self._gen = None

    def split(self, key):
        return Rng(self.seed, self.path + (_key_int(key),))

    @property
    def generator(self):
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
            key = ss.generate_state(2, dtype=np.uint64)
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n, size, replace=False):
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
