"""Named, independent RNG streams derived from one integer seed."""

import zlib

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for ``name`` that depends only on ``(seed, name)``.

    Streams with different names never share state, so e.g. adding a dropout
    draw does not shift the shuffling order.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) % (1 << 64), key]))
