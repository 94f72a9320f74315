"""Named random streams.

All randomness comes from numpy's ``SeedSequence`` feeding a PCG64
generator. A stream is identified by the run seed plus a tuple of names
or integers, e.g. ``("encoder", "block2", "qkv_w")``; each distinct key
spawns an independent, reproducible stream regardless of the order in
which streams are requested.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *key) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``."""
    entropy = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(entropy, spawn_key=tuple(_key_word(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples truncated to ``[-bound*std, bound*std]`` by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
