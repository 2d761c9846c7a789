"""Seeded random streams built on the counter-based Philox generator.

Every consumer of randomness (data generation, noise draws, dropout masks,
parameter init) pulls an independent stream by label, so replaying any one
stream never depends on how often the others were consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _label_key(seed: int, label: str) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class Rng:
    """Splittable source of independent, replayable random streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64

    def stream(self, label: str) -> np.random.Generator:
        """Return a fresh generator for `label`, identical across calls."""
        return np.random.Generator(np.random.Philox(key=_label_key(self.seed, label)))

    def child_seed(self, label: str) -> int:
        """Derive a 64-bit seed for a subordinate Rng."""
        return int(_label_key(self.seed, label)[0])
