"""Named, splittable RNG streams.

Streams are keyed by (global seed, *names) so that adding a tile or a phase
never perturbs the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1), spawn_key=tuple(_name_key(n) for n in names))


def derive_rng(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *names)))
