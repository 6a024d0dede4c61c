from typing import Sequence

import numpy as np

from app.utils.hashing import stable_int


class Rng:
    """
    Named, seedable, splittable random generator.

    A generator is identified by its root seed and the path of names used to
    split it, so `Rng(7).split("dropout").split("step-3")` yields the same
    stream in every run. Splitting never consumes state from the parent.
    """

    def __init__(self, seed: int, path: Sequence[str] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed] + [stable_int(name) for name in self.path]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    @property
    def name(self) -> str:
        return "/".join(self.path) or "<root>"

    def split(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    def random(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.random(shape, dtype=np.float64).astype(dtype, copy=False)

    def uniform(self, low: float, high: float, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype, copy=False)

    def normal(self, std: float, shape, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype, copy=False)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p=None):
        return int(self._gen.choice(n, p=p))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.name!r})"
