"""Random number generation and parameter initialization.

All randomness goes through ``numpy.random.Generator`` backed by PCG64, whose
output stream for a given seed is fixed across platforms and numpy versions.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def make_rng(seed: int) -> np.random.Generator:
    """Create the PCG64 generator used everywhere in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def child_rng(rng: np.random.Generator) -> np.random.Generator:
    """Derive an independent generator from ``rng`` (advances ``rng`` by one draw)."""
    return make_rng(int(rng.integers(0, 2**63 - 1)))


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Draw from ``normal(0, sqrt(2 / fan_in))``."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
