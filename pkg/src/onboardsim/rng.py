"""Deterministic RNG stream derivation.

Every random draw in the platform comes from a generator derived from
the experiment seed plus a string/int path, so concurrent or reordered
work cannot change results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:4], "big")


def rng_for(seed: int, *path) -> np.random.Generator:
    """Independent generator for (seed, *path); stable across runs."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_token(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seed(seed: int, *path) -> int:
    """Stable integer sub-seed for nested pipeline stages."""
    return int(rng_for(seed, *path).integers(0, 2 ** 31 - 1))
