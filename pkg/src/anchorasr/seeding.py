"""Deterministic RNG streams keyed by (seed, purpose, indices).

Every random decision in the pipeline draws from a stream derived here, so
any artifact is a pure function of the experiment seed plus its own keys.
String keys are folded through crc32 to keep the derivation platform-stable.
"""
from __future__ import annotations

import zlib

import numpy as np


def _fold(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    raise TypeError(f"rng key must be str or int, got {type(key).__name__}")


def rng_stream(*keys) -> np.random.Generator:
    """A PCG64 generator for the given key tuple. Same keys, same stream."""
    if not keys:
        raise ValueError("rng_stream needs at least one key")
    return np.random.default_rng([_fold(k) for k in keys])


def derive_seed(*keys) -> int:
    """A stable 63-bit integer seed derived from the key tuple."""
    return int(rng_stream(*keys).integers(0, 2**63 - 1))
