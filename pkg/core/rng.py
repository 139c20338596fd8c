"""Seeded random streams.

Every stream is a numpy ``Philox`` generator (Philox-4x64-10, Salmon et al. 2011), a
counter-based generator whose output depends only on its 128-bit key and 256-bit counter.
The key holds the 64-bit seed; the counter's third word selects the sub-stream, so
``SeededRng(seed, counter)`` produces the same draws on every platform.
"""

from typing import Any, Dict

import numpy as np

_MASK64 = (1 << 64) - 1


class SeededRng:
    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64
        bit_generator = np.random.Philox(key=[self.seed, 0], counter=[0, 0, self.counter, 0])
        self.generator = np.random.Generator(bit_generator)

    def child(self, *path: int) -> "SeededRng":
        """Independent sub-stream addressed by an integer path, e.g. ``rng.child(step, 2)``."""
        counter = self.counter
        for part in path:
            counter = (counter * 1_000_003 + int(part) + 1) & _MASK64
        return SeededRng(self.seed, counter)

    # Thin draws used across the code base
    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def gamma(self, shape: float, scale: float = 1.0, size=None):
        return self.generator.gamma(shape, scale, size)

    def random(self) -> float:
        return float(self.generator.random())

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, values, size=None, replace: bool = True):
        return self.generator.choice(values, size=size, replace=replace)

    def state(self) -> Dict[str, Any]:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "SeededRng":
        return cls(state["seed"], state["counter"])

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, counter={self.counter})"
