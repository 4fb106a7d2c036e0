"""Deterministic fan-out of one user-facing seed into named sub-streams.

Every stochastic component (parameter init, window sampler, split draw,
clustering, ...) pulls its own generator via ``substream(seed, name)``.
The name is hashed with crc32 so the mapping is stable across runs,
platforms and Python hash randomization.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (seed, name)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
