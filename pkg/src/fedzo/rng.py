"""Deterministic, splittable random streams.

Every stream is a Philox counter-based generator keyed by a master seed and
a tuple of integer keys, so the draws a client sees depend only on
``(master_seed, client_id, round)`` and never on scheduling.
"""

from __future__ import annotations

import numpy as np

RNG_VERSION = 1

# key namespaces for non-client streams
SETUP = 1_000_001
PARTITION = 1_000_002
ORACLES = 1_000_003
INIT = 1_000_004


def stream(master_seed: int, *keys: int) -> np.random.Generator:
    if master_seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be nonnegative")
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def client_stream(master_seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    return stream(master_seed, client_id, round_idx)
