"""Named, hierarchical random streams.

Every consumer asks for ``stream(seed, "module", "purpose", ...)``. Streams with
different name paths are statistically independent and adding a new consumer
never shifts the numbers another consumer sees.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(names: tuple[object, ...]) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)


def seed_sequence(seed: int, *names: object) -> np.random.SeedSequence:
    if int(seed) < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(int(seed), spawn_key=_key(names))


def stream(seed: int, *names: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))


def derive_seed(seed: int, *names: object) -> int:
    """A 63-bit integer seed for a named child stream."""
    lo, hi = seed_sequence(seed, *names).generate_state(2, np.uint32)
    return (int(hi) << 32 | int(lo)) & ((1 << 63) - 1)
