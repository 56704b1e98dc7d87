"""Seeded random streams.

All randomness flows through numpy's PCG64 (a 128-bit permuted
linear-congruential generator) keyed by a 64-bit run seed plus a purpose
code, via ``SeedSequence(seed, spawn_key=(purpose, *extra))``.  PCG64 output
is specified bit-for-bit, so streams are identical on every platform.
"""

import numpy as np

PURPOSES = {
    "init": 1,
    "dropout": 2,
    "data": 3,
    "masks": 4,
    "shuffle": 5,
    "world": 6,
    "test": 7,
}


def make_rng(seed, purpose, *extra):
    """Independent generator for ``(seed, purpose, *extra)``."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown rng purpose {purpose!r}; expected one of {sorted(PURPOSES)}")
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES[purpose], *map(int, extra)))
    return np.random.Generator(np.random.PCG64(ss))
