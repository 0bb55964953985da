"""Deterministic random streams.

Every random draw in a run comes from a stream keyed by
``(master seed, purpose tag, *ids)``.  Streams are independent of the order in
which they are requested, so running clients sequentially or in parallel
produces the same trace.
"""

import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    # crc32 is stable across processes, unlike hash()
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *ids: int) -> np.random.Generator:
    """Return a fresh PCG64 generator for one purpose."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _tag_key(tag)]
    entropy.extend(int(i) for i in ids)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
