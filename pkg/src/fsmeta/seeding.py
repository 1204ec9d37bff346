"""Seed derivation: every random stream comes from one u64 root seed.

A component's stream seed is ``root ^ h(name)`` where ``h`` is the first
8 bytes (little-endian) of the BLAKE2b digest of the component name.
Indexed sub-streams (episode ``i`` of a stream) are seeded with the
``SeedSequence`` entropy pair ``(stream_seed, i)``.
"""

from __future__ import annotations

import hashlib

import numpy as np

U64 = (1 << 64) - 1


def name_hash(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def derive_seed(seed: int, component: str) -> int:
    return (int(seed) & U64) ^ name_hash(component)


def component_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, component))


def indexed_rng(stream_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(stream_seed) & U64, int(index)]))
