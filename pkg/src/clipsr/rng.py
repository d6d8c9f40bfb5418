"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence``; named sub-streams are derived by hashing the stream name
into the seed entropy so that adding a consumer never shifts another one.
"""

from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, *keys) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        entropy.append(zlib.crc32(str(k).encode()) if not isinstance(k, int) else int(k))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
