"""Named, reproducible RNG streams.

Every random draw in the project comes from a stream derived from a 64-bit
master seed plus a sequence of tags (strings or ints). The derivation is a
splitmix64 chain over stable hashes of the tags, so streams are independent
of Python's randomized ``hash()`` and identical across runs and platforms.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _tag64(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    if isinstance(tag, str):
        # FNV-1a over UTF-8 bytes
        h = 0xCBF29CE484222325
        for b in tag.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & _MASK64
        return h
    raise TypeError(f"rng tags must be str or int, got {type(tag).__name__}")


def derive_seed(master_seed: int, *tags) -> int:
    """Collapse (master_seed, tags...) into a single 64-bit stream seed."""
    s = int(master_seed) & _MASK64
    for tag in tags:
        s = splitmix64(s ^ _tag64(tag))
    return splitmix64(s)


def stream(master_seed: int, *tags) -> np.random.Generator:
    """A fresh Generator for the named stream; same arguments, same draws."""
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, *tags)))
