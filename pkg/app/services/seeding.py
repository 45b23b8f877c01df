"""Named random streams derived from one master seed.

Every consumer of randomness gets its own generator keyed by ``(seed,
purpose)``, so adding draws in one place never shifts the numbers another
place sees. Centralized and cloud runs that share a seed therefore see the
same initial dictionary, reference vector and power-method starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from app.services.linalg import FloatArray, unit

STREAM_REFERENCE = 1
STREAM_POWER_INIT = 2
STREAM_REINIT = 3
STREAM_SYNTHETIC = 4
STREAM_SPLIT = 5
STREAM_PARTS = 6


def stream(seed: int, purpose: int, *keys: int) -> np.random.Generator:
    """Return the generator for *purpose* (and optional sub-keys) under *seed*."""
    return np.random.default_rng([seed, purpose, *keys])


def unit_gaussian(rng: np.random.Generator, n: int) -> FloatArray:
    """Draw a direction uniformly on the unit sphere in R^n."""
    return unit(rng.standard_normal(n))


def reference_vector(n: int, seed: int) -> FloatArray:
    """The shared sign reference ``d_ref`` used to orient atoms."""
    return unit_gaussian(stream(seed, STREAM_REFERENCE), n)


@dataclass
class SeedStreams:
    """Mutable per-run generators shared (by value) across all sites."""

    power_init: np.random.Generator
    reinit: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> SeedStreams:
        return cls(
            power_init=stream(seed, STREAM_POWER_INIT),
            reinit=stream(seed, STREAM_REINIT),
        )
