"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by a
master seed plus a tuple of integer or string stream ids, so work split across
processes reproduces the serial result exactly.
"""

import zlib

import numpy as np


def _key_word(k):
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode("utf-8"))


def stream(seed, *keys):
    """Return an independent generator for ``(seed, *keys)``."""
    words = [int(seed) & 0xFFFFFFFF] + [_key_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def gumbel(rng, shape):
    u = rng.random(shape)
    # guard the open interval
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))
