"""Counter-based random streams.

Each ``(seed, stream)`` pair keys an independent Philox generator, so a draw
depends only on its key and position in that stream, never on the order
in which other streams were consumed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

StreamKey = Union[int, str, Tuple[Union[int, str], ...]]


def _stream_words(stream: StreamKey) -> tuple:
    if isinstance(stream, (int, np.integer)):
        return (int(stream),)
    if isinstance(stream, str):
        digest = hashlib.sha256(stream.encode()).digest()
        return (int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:8], "little"))
    words = []
    for part in stream:
        words.extend(_stream_words(part))
    return tuple(words)


@dataclass(frozen=True)
class Rng:
    """Deterministic random source identified by a 64-bit seed and a stream key."""

    seed: int
    stream: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")

    def child(self, *key: StreamKey) -> "Rng":
        """Sub-stream; ``child("a", 3)`` is independent of every other key."""
        return Rng(self.seed, self.stream + _stream_words(key))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))

    # convenience one-shot draws
    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator().standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator().uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator().integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
