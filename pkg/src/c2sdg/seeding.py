"""Deterministic RNG stream derivation.

Every random draw in the package comes from a Generator derived from a tuple
of non-negative integers (global seed, purpose tag, epoch, sample index, ...).
Streams are therefore independent of iteration order, which keeps training
runs bitwise reproducible and makes per-sample work safe to parallelise.
"""

import zlib

import numpy as np

# Purpose tags keep unrelated streams from colliding even when the remaining
# entropy components are equal.
TAG_MODEL = 1
TAG_SHUFFLE = 2
TAG_SPATIAL = 3
TAG_STYLE = 4
TAG_GEOMETRY = 5
TAG_DOMAIN_STYLE = 6
TAG_CONTRAST = 7


def derive_rng(*entropy: int) -> np.random.Generator:
    """Build a PCG64 Generator from a tuple of non-negative integers."""
    parts = [int(e) for e in entropy]
    if any(p < 0 for p in parts):
        raise ValueError(f"entropy components must be non-negative, got {parts}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(parts)))


def stable_name_hash(name: str) -> int:
    """Platform-stable 32-bit hash of a string (for domain names etc.)."""
    return zlib.crc32(name.encode("utf-8"))
