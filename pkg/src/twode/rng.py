"""Named, splittable random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, purpose, index)``. Purposes are fixed integers so a stream can be
replayed on its own: the observation noise of trajectory 7 does not depend on
how many latent draws happened before it.
"""
from __future__ import annotations

import hashlib

import numpy as np

PURPOSES = {
    "latent_u": 1,
    "latent_w": 2,
    "init": 3,
    "noise": 4,
    "actions": 5,
    "aux": 6,
    "split": 7,
    "init_params": 8,
    "shuffle": 9,
    "rollout": 10,
}

U64_MASK = (1 << 64) - 1


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Return the generator for ``purpose`` and ``index`` under ``seed``."""
    if purpose not in PURPOSES:
        raise KeyError(f"unknown stream purpose {purpose!r}")
    ss = np.random.SeedSequence(int(seed) & U64_MASK, spawn_key=(PURPOSES[purpose], int(index)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(*parts) -> int:
    """Hash arbitrary labels into a 64-bit seed (stable across platforms)."""
    text = "\x1f".join(repr(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
