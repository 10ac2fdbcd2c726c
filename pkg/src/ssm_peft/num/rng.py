"""Seeded, counter-based random streams (Philox under the hood)."""

import numpy as np


class RngStream:
    """Deterministic random stream fully specified by a 64-bit seed.

    Draws come from numpy's Philox counter-based generator, so identical seeds
    and draw orders give bit-identical output on every platform. Child streams
    made with :meth:`spawn` are disjoint from the parent and from each other.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self._gen = np.random.Generator(np.random.Philox(ss))

    @property
    def counter(self):
        return tuple(int(c) for c in self._gen.bit_generator.state["state"]["counter"])

    def spawn(self, *key):
        return RngStream(self.seed, self.key + tuple(key))

    def uniform(self, shape=(), low=0.0, high=1.0):
        if not high > low:
            raise ValueError(f"uniform: need low < high, got [{low}, {high})")
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def normal(self, shape=(), mean=0.0, std=1.0):
        if std < 0:
            raise ValueError(f"normal: standard deviation must be >= 0, got {std}")
        return mean + std * self._gen.standard_normal(size=shape)

    def integers(self, shape=(), low=0, high=None):
        """Integers in [low, high) returned as float64 (the tensor dtype)."""
        if high is None:
            low, high = 0, low
        if high <= low:
            raise ValueError(f"integers: empty range [{low}, {high})")
        return self._gen.integers(low, high, size=shape).astype(np.float64)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)


def rng_draw(stream, distribution, shape=()):
    """Draw from ``stream`` using a distribution tuple.

    ``distribution`` is one of ``("uniform", a, b)``, ``("normal", mu, sigma)``
    or ``("integers", low, high)``.
    """
    kind, *args = distribution
    if kind == "uniform":
        return stream.uniform(shape, *args)
    if kind == "normal":
        return stream.normal(shape, *args)
    if kind in ("integers", "integer"):
        return stream.integers(shape, *args)
    raise ValueError(f"unknown distribution {kind!r}")
