"""Deterministic, splittable random streams.

Every stochastic piece of the toolkit (weight init, shuffling, dropout
masks, synthetic data, MC sampling) draws from an :class:`RngStream`.
A stream is addressed by ``(seed, stream, counter)`` and is backed by
the counter-based Philox bit generator, so identical addresses yield
identical draws on every platform, and independent sub-streams can be
derived up front and consumed in any order.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix64(a: int, b: int) -> int:
    """Combine two 64-bit values into one (splitmix64 finalizer)."""
    z = (a * 0x9E3779B97F4A7C15 + b) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """A reproducible random stream addressed by (seed, stream, counter).

    Each draw method consumes one counter slot: it builds a Philox
    generator positioned at the current counter, advances the counter,
    and returns the sample. Reconstructing a stream with the same
    ``(seed, stream, counter)`` replays the exact same draws. A single
    draw may request fewer than 2**64 blocks, which every caller here
    is comfortably below.
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter) & _MASK64

    def derive(self, stream_id: int) -> "RngStream":
        """Create an independent sub-stream; independent of draw order."""
        return RngStream(self.seed, _mix64(self.stream, int(stream_id) & _MASK64))

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.stream, self.counter)

    def _next_generator(self) -> np.random.Generator:
        # counter word 1 strides whole draws so they can never overlap
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64),
            counter=np.array([0, self.counter, 0, 0], dtype=np.uint64),
        )
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(bitgen)

    def random(self, size=None) -> np.ndarray:
        return self._next_generator().random(size=size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._next_generator().uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._next_generator().normal(loc, scale, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in [low, high) like numpy's Generator.integers."""
        return self._next_generator().integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._next_generator().permutation(n)

    def choice(self, options, size=None, p=None):
        return self._next_generator().choice(options, size=size, p=p)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self._next_generator().random(size=size) < p

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"
