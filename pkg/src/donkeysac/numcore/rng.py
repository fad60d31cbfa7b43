"""Seeded, counter-based random streams."""

from __future__ import annotations

import numpy as np


class SeededRng:
    """Philox-backed stream; the same seed gives the same draws on every platform.

    ``spawn(key)`` derives an independent child stream, so separate consumers
    (environment noise, exploration, batch sampling, ...) never perturb each
    other.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, key: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + (int(key),))

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self.gen.standard_normal(shape, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self.gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self.gen.integers(low, high, shape)

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict):
        self.gen.bit_generator.state = state
