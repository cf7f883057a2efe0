"""Random stream helpers.

Every randomised routine takes an explicit stream.  Replicate ``r`` of a run
with base seed ``s`` uses ``SeedSequence(s, spawn_key=(r,))``, which is what
``SeedSequence(s).spawn(R)[r]`` produces, so replicate streams are
independent of how many replicates are requested.
"""

from __future__ import annotations

import numpy as np


def as_generator(seed=None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def replicate_seed(base: int, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(base, spawn_key=(replicate,))


def replicate_generator(base: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(replicate_seed(base, replicate))
