"""Named, seeded random streams so every subsystem draws reproducibly."""

from __future__ import annotations

import hashlib

import numpy as np


def seeded_stream(seed: int, name: str) -> np.random.Generator:
    """Return the generator for (seed, name); the same pair always yields the same stream."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in (0, 4, 8, 12)]
    return np.random.default_rng(np.random.SeedSequence([seed, *words]))
