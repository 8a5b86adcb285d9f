"""Named, splittable random streams.

A stream is identified by a root seed plus a path of names/integers, so
``stream(7, "noise", 12)`` is the same generator in every process and on
every resume, independent of what other streams were consumed before it.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *path) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(seq))
