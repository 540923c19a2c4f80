"""Seeded substreams.

Every stochastic stage draws from its own Philox stream keyed by
``(master_seed, stream_name, index)`` so stages can be regenerated in
isolation and blocks can be produced in any order.
"""
import zlib

import numpy as np

PRNG_ID = "numpy.Philox4x64-10/SeedSequence"


def stream_key(name):
    return zlib.crc32(name.encode("utf-8"))


def substream(seed, name, *index):
    """Return an independent ``Generator`` for ``(seed, name, *index)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name),) + tuple(int(i) for i in index))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, name):
    """A 63-bit child seed for stage ``name``, for APIs that take a plain integer."""
    return int(substream(seed, name).integers(0, 2**63 - 1))
