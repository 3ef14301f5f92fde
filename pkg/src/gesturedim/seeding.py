"""Deterministic seed derivation: every random stream descends from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np

U64 = 2**64


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) % U64
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master: int, *tags) -> int:
    """A u64 seed that depends only on ``master`` and the ordered ``tags``."""
    words = [int(master) % U64] + [_tag_int(t) for t in tags]
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(master: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *tags))
