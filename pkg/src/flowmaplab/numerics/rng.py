"""Counter-based random streams with hierarchical labels.

Built on numpy's Philox generator.  A stream is identified by
``(seed, label)``; child streams extend the label path, so any part of
a run can rebuild its stream from the root seed plus a string, without
threading generator state through the program.  Checkpoints therefore
only need to record the seed and the step index.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_from(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class RngStream:
    """A labelled, forkable source of random draws.

    Two streams with the same ``(seed, label)`` produce identical
    sequences; streams with different labels are statistically
    independent (distinct 128-bit Philox keys).
    """

    __slots__ = ("seed", "label", "_gen")

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed)
        self.label = label
        self._gen = np.random.Generator(np.random.Philox(key=_key_from(self.seed, label)))

    def child(self, sub: str) -> "RngStream":
        """Fork an independent stream at ``label/sub``."""
        return RngStream(self.seed, f"{self.label}/{sub}")

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, label={self.label!r})"


def rng_fork(seed: int, label: str) -> RngStream:
    """Stream for ``label`` under ``seed``; equal labels give equal draws."""
    return RngStream(seed, label)
