"""Named random streams derived from a single root seed."""

import zlib

import numpy as np


def stream(seed, name, *extra):
    """Return a Generator for the stream ``name`` under ``seed``.

    Streams with different names (or different ``extra`` integers, e.g. an
    epoch counter) are statistically independent, and each is a pure function
    of its arguments.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())]
    key.extend(int(x) for x in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
