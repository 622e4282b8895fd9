"""Deterministic derivation of independent random streams.

Every random draw in the package comes from a ``numpy.random.Generator``
seeded by a 64-bit value derived here from a master seed and a path of
integer or string keys, so results do not depend on scheduling.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    """SplitMix64 finaliser: a bijective 64-bit avalanche mixer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stable_hash(text: str) -> int:
    """64-bit hash of a string, identical across processes and platforms."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(master: int, *keys: int | str) -> int:
    """Fold ``keys`` into ``master`` one at a time."""
    s = mix64(int(master) & _MASK)
    for k in keys:
        v = stable_hash(k) if isinstance(k, str) else int(k) & _MASK
        s = mix64((s + 0x9E3779B97F4A7C15 + mix64(v)) & _MASK)
    return s


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
