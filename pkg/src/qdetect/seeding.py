"""Deterministic counter-based RNG streams.

Every stochastic component keys an independent Philox stream off a tuple of
integers (seed, stream tag, indices...).  Streams are stable across batch
sizes, generation order, and worker counts.
"""

from __future__ import annotations

import numpy as np


def seed_sequence(seed, *parts) -> np.random.SeedSequence:
    entropy = tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)
    return np.random.SeedSequence(entropy + tuple(int(p) for p in parts))


def generator(seed, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *parts)))
