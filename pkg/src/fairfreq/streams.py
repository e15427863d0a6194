"""Seeded random streams derived from a single master seed.

Every stream is ``PCG64(SeedSequence(master_seed, spawn_key=key))``.  The
key is a tuple of small integers:

* ``(COINS,)``      participation coins and report sets, consumed in user order
* ``(USER, i)``     share randomness of user ``i`` (0-based)
* ``(ELECTION,)``   aggregator election performed by the first helper server
* ``(NOISE,)``      Gaussian perturbation

Experiments derive one master seed per (grid point, trial) with
:func:`derive_seed`, so trials can run in any order or in parallel and still
reproduce bit for bit.
"""

import numpy as np

COINS = 0
USER = 1
ELECTION = 2
NOISE = 3

DEFAULT_SEED = 42


def stream(master_seed, *key):
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(master_seed, *key):
    """A 63-bit integer seed for the child identified by ``key``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def coin_stream(master_seed):
    return stream(master_seed, COINS)


def user_stream(master_seed, user):
    return stream(master_seed, USER, user)


def as_generator(rng):
    """Accept a Generator, an int seed or None (fresh entropy)."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
