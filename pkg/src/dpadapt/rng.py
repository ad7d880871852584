"""Named random substreams derived from one root seed.

Every stage of a run (data generation, init, DP noise, GMM fitting,
adaptation, attacks) draws from its own substream, so stages are
reproducible in isolation and independent of each other's draw counts.
"""

import zlib

import numpy as np


def substream(seed, *names):
    """Generator for the substream identified by `names` under `seed`.

    The name tuple is hashed with crc32 (stable across platforms and
    interpreter runs, unlike builtin hash) into a SeedSequence spawn key.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
