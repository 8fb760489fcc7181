"""Seed derivation with SplitMix64.

Each experiment purpose (pool, context, lists, labels, bias, init, ...) draws
from its own numpy generator whose seed is derived from a root seed and a
purpose tag, so changing one stream cannot perturb another.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next(self) -> int:
        self.state, out = splitmix64(self.state)
        return out


def derive_seed(seed: int, *tags: str | int) -> int:
    """Deterministic 64-bit child seed for ``seed`` and a path of tags."""
    state = int(seed) & MASK64
    state, out = splitmix64(state)
    for tag in tags:
        if isinstance(tag, str):
            tag = zlib.crc32(tag.encode("utf-8"))
        state = (out ^ (int(tag) & MASK64)) & MASK64
        state, out = splitmix64(state)
    return out


def generator(seed: int, *tags: str | int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))
