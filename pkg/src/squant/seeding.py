"""Named substreams off a single 64-bit seed.

Every source of randomness in the package draws from `substream(seed, name)`
so that any command rerun with the same seed reproduces bit-identical output.
"""

import hashlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for (seed, name).

    The stream name is hashed into the seed sequence, so distinct names give
    statistically independent streams and the mapping is stable across runs
    and platforms.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words]))
