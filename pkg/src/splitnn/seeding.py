"""Deterministic RNG derivation.

Every random decision in the package flows through a numpy SeedSequence
built from a user seed plus a role key, so independent pipeline stages
(fold assignment, weight init, epoch shuffles, ...) draw from decoupled
streams and any run can be reproduced from its seed alone.
"""

import numpy as np

# role keys for spawn_key derivation
FOLD_PLAN = 0
WEIGHT_INIT = 1
EPOCH_SHUFFLE = 2
INNER_PLAN = 3
INNER_TRAIN = 4
OUTER_TRAIN = 5
RETRY = 6
HOLDOUT_SPLIT = 7

_MASK64 = (1 << 64) - 1


def seed_sequence(seed, *key):
    """SeedSequence for ``seed`` under a role key (extra ints allowed)."""
    return np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(int(k) for k in key))


def generator(seed, *key):
    """A PCG64 Generator on the derived stream."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *key)))


def derive_seed(seed, *key):
    """Collapse a derived stream to a plain 64-bit integer seed."""
    return int(seed_sequence(seed, *key).generate_state(1, dtype=np.uint64)[0])
