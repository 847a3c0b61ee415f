"""Deterministic random-stream derivation.

Every source of randomness in a run is an independent counter-based stream
derived from a single master seed and a (purpose, index) pair.  Machine i's
data stream is ``stream(seed, DATA, i)``, its local noise stream is
``stream(seed, NOISE, i)``, and the server's noise stream is
``stream(seed, NOISE, 0)`` -- deliberately the same key as machine 0's noise
stream so that trusted and untrusted runs coincide bit-for-bit at M=1.
"""

from __future__ import annotations

import numpy as np

DATA = 0
NOISE = 1
SHARD = 2
QUERY = 3
PROBLEM = 4

# Recorded in run metadata so traces stay reproducible across releases.
RNG_ALGORITHM = "philox4x64/numpy-ziggurat/v1"

_MAX_SEED = 2**64


def stream(master_seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Return the generator for (purpose, index) under the master seed."""
    if not 0 <= master_seed < _MAX_SEED:
        raise ValueError(f"master seed must be in [0, 2**64), got {master_seed}")
    if not 0 <= index < 2**32:
        raise ValueError(f"stream index must be in [0, 2**32), got {index}")
    key = np.array([master_seed, (purpose << 32) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
