"""Counter-based RNG streams, one per (seed, purpose, index).

Philox keys are (seed, domain_offset + index), so every record, mask,
shuffle, and init draw comes from its own stream: items are reproducible
in isolation, parallel workers cannot race, and two purposes sharing a
seed never replay each other's bits.
"""

from __future__ import annotations

import numpy as np

DATA = 0  # dataset record index
INIT = 1 << 40  # model/adapter initialization
MASK = 1 << 41  # per-(epoch, item) training masks
SHUFFLE = 1 << 42  # per-epoch batch order
EVAL = 1 << 43  # per-record evaluation masks
SAMPLE = 1 << 44  # per-record top-k sampling


def stream(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(key=[seed, domain + index]))
