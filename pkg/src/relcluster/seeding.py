"""Named, deterministic RNG streams.

Every random draw in the library flows from a single integer seed through a
named stream, e.g. ``stream(seed, "kmeans", epoch)``.  Streams are independent
PCG64 generators keyed by CRC32 of their tags, so components can be re-run or
reordered without consuming each other's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(*tags) -> list[int]:
    return [zlib.crc32(str(t).encode("utf8")) for t in tags]


def child_sequence(seed: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed)] + stream_key(*tags))


def stream(seed: int, *tags) -> np.random.Generator:
    """Generator for the named stream derived from ``seed``."""
    return np.random.default_rng(child_sequence(seed, *tags))
