"""Named deterministic random sub-streams derived from one root seed.

Every stochastic component pulls its own generator through ``named_stream`` so
that a single seed reproduces a full run bit for bit, and so that changing how
often one component draws never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: str | int) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(part.encode("utf-8"))


def named_stream(seed: int, *parts: str | int) -> np.random.Generator:
    """Return a generator keyed by ``seed`` and a stable label path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(p) for p in parts]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
