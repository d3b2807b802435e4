"""Deterministic random number generation.

Every seeded operation in this package draws from numpy's Philox4x64-10
counter-based generator, so a given integer seed reproduces the same
stream on any platform and numpy version that ships Philox. Composite
procedures never share one generator across stages; they derive child
seeds with `child_seeds` and build a fresh generator per stage, which
keeps each stage's stream independent of how often the others draw.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator for the given seed."""
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    return np.random.Generator(np.random.Philox(key=seed))


def child_seeds(seed: int, n: int) -> list[int]:
    """Derive `n` independent child seeds from a parent seed.

    Children are consecutive 63-bit draws from the parent's Philox
    stream, so (seed, index) determines each child exactly.
    """
    rng = make_rng(seed)
    return [int(s) for s in rng.integers(0, 2**63, size=n)]
