"""Named random streams: every consumer derives its own generator from one seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; stable across runs and platforms."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))] + [int(e) for e in extra]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
