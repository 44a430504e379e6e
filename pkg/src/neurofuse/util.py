"""Small shared helpers: deterministic rounding and seeded RNG streams."""

from __future__ import annotations

import numpy as np


def round_half_away(x):
    """Round to nearest integer with halves going away from zero.

    numpy's ``round`` ties to even, which disagrees with the fixed-point
    conventions used by the intensity maps and the weight quantizer, so this
    is used everywhere a rounded integer leaves the float domain.
    """
    x = np.asarray(x)
    return (np.floor(np.abs(x) + 0.5) * np.sign(x)).astype(np.int64)


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """A generator keyed by (seed, *stream) so parallel streams never collide."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))
