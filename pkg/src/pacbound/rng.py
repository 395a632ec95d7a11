"""Deterministic seed derivation.

Child streams are keyed by a master seed plus any path of labels, using a
counter-based bit generator so parallel workers never share a stream.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    digest = hashlib.sha256(repr(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master: int, *path) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(_key(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator(master: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return generator(0 if seed is None else seed)
