"""
seeding.py

Deterministic random streams. A run has one root seed; every Monte-Carlo
chunk, replicate and sub-task gets its own numpy Generator derived from
(seed, label, index) through a keyed hash, so results never depend on how
work is spread over threads.
"""
import hashlib
from typing import Iterator

import numpy as np

MAX_SEED = 2**64 - 1


def label_key(label: str) -> int:
    """64-bit blake2b digest of a stream label."""
    digest = hashlib.blake2b(label.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, byteorder='big')


def derive(seed: int, label: str, index: int = 0) -> np.random.Generator:
    """
    Return the Generator for stream (seed, label, index).

    Args:
        seed: root seed in [0, 2**64).
        label: stream name, e.g. "histogram/left".
        index: chunk or replicate number.
    """
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"Seed {seed} is not a 64-bit unsigned integer")
    if index < 0:
        raise ValueError(f"Stream index must be nonnegative, got {index}")
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, label_key(label), int(index)])
    return np.random.Generator(np.random.PCG64(sequence))


class Streams:
    """
    Stream factory bound to a root seed.

    `child(label)` returns a new factory whose labels are prefixed, which lets
    a procedure hand disjoint stream families to its sub-procedures.
    """

    def __init__(self, seed: int, prefix: str = ''):
        if not 0 <= int(seed) <= MAX_SEED:
            raise ValueError(f"Seed {seed} is not a 64-bit unsigned integer")
        self.seed = int(seed)
        self.prefix = prefix

    def _label(self, label: str) -> str:
        return f"{self.prefix}/{label}" if self.prefix else label

    def generator(self, label: str, index: int = 0) -> np.random.Generator:
        return derive(self.seed, self._label(label), index)

    def generators(self, label: str, count: int) -> Iterator[np.random.Generator]:
        for i in range(count):
            yield self.generator(label, i)

    def child(self, label: str) -> 'Streams':
        return Streams(self.seed, self._label(label))

    def __repr__(self) -> str:
        return f"Streams(seed={self.seed}, prefix={self.prefix!r})"


def spawn(rng: np.random.Generator) -> np.random.Generator:
    """Child Generator owned by one lazy stream; pulls elsewhere never shift its draws."""
    return rng.spawn(1)[0]
