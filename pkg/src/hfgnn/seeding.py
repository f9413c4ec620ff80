"""Named random streams derived from a single 64-bit root seed.

A stream is identified by a purpose label plus integer indices, e.g.
``("train", round, client)``.  Streams do not depend on the order in which
they are requested, so reordering calls never changes results.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _spawn_key(purpose: str, indices: tuple[int, ...]) -> tuple[int, ...]:
    key = [zlib.crc32(purpose.encode("utf-8"))]
    for i in indices:
        if i < 0:
            raise ValueError(f"stream index must be non-negative, got {i}")
        key.append(int(i))
    return tuple(key)


def seed_sequence(seed: int, purpose: str, *indices: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & _MASK64, spawn_key=_spawn_key(purpose, indices))


def make_rng(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return a fresh generator for the stream ``(seed, purpose, *indices)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, purpose, *indices)))


def derive_seed(seed: int, purpose: str, *indices: int) -> int:
    """Derive a child 64-bit seed, for handing to functions that take a seed."""
    state = seed_sequence(seed, purpose, *indices).generate_state(1, dtype=np.uint64)
    return int(state[0])
