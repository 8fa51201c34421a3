"""Seed derivation.

Every random draw in the package starts from one 64-bit root seed. Child seeds
are derived with SplitMix64 (a shift/xor/multiply mixer) over the root seed and
a tuple of string or integer keys, so two call sites never share a stream and
resuming at step ``k`` reproduces exactly what an uninterrupted run would draw.
Bulk draws then go through numpy's PCG64 seeded with the derived value.
"""
from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & MASK64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(root: int, *keys) -> int:
    """Mix ``keys`` into ``root`` and return a new 64-bit seed."""
    state = splitmix64(int(root) & MASK64)
    for key in keys:
        state = splitmix64(state ^ _key_to_int(key))
    return state


def make_rng(root: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, *keys)))
