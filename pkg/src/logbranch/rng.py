"""Seed handling.

Every replicate draws from its own generator, derived from the root seed, a
stream tag and the replicate index.  Results therefore do not depend on how
replicates are split across worker processes.
"""

from __future__ import annotations

import numpy as np

# stream tags keep independent parts of one experiment on separate streams
STREAM_FORWARD = 0
STREAM_SDE = 1
STREAM_DUAL = 2
STREAM_ASG = 3
STREAM_GENEALOGY = 4
STREAM_MISC = 5


def check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError("seed must be an integer")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must lie in [0, 2**64)")
    return seed


def replicate_rng(seed: int, index: int = 0, stream: int = 0, *cell: int) -> np.random.Generator:
    """Generator for replicate ``index`` of ``stream`` under root ``seed``.

    ``cell`` optionally tags a grid cell, giving each cell its own streams.
    """
    key = (int(stream), *(int(c) for c in cell), int(index))
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=key)
    return np.random.Generator(np.random.SFC64(ss))


def as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return replicate_rng(rng_or_seed)
