"""
Seed derivation.

Every random draw in the package comes from a generator keyed by the run seed
plus a path of small integers naming the component (cell index, edge index,
op index, ...). Two networks built from the same seed therefore share the
parameters of every component they have in common.
"""

import numpy as np


def derive_seed(seed: int, *path: int) -> int:
    """Return a 32-bit integer seed for the component at ``path``."""
    sequence = np.random.SeedSequence([int(seed), *[int(p) for p in path]])
    return int(sequence.generate_state(1)[0])


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Return a numpy Generator for the component at ``path``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(p) for p in path]]))
