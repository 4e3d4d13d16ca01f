"""Seeded, splittable randomness.

All stochastic draws in the project flow through :class:`Rng`, which wraps
numpy's PCG64 bit generator keyed by ``SeedSequence(seed, spawn_key=path)``.
A root stream has an empty path; ``split(i)`` extends the path, so streams
with different split indices are statistically independent and every draw
sequence is a pure function of (seed, path).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Rng:
    """Deterministic random stream owned by a single consumer."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be a non-negative integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=self.path))
        )

    def split(self, index: int) -> "Rng":
        """Derive an independent child stream. Does not advance this stream."""
        return Rng(self.seed, self.path + (int(index),))

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray | int:
        out = self._gen.integers(low, high, size=shape)
        return int(out) if shape is None else out

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


def gaussian_sample(rng: Rng, dims, dtype=np.float32) -> Tensor:
    """I.i.d. standard normal tensor of shape ``dims``, deterministic in rng state."""
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0:
        raise ValueError("dims must be nonempty")
    return Tensor(rng.normal(dims, dtype=dtype))
