"""Keyed random streams: every stream is a pure function of (seed, keys)."""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            return (1 << 32) + int(k)
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``hash(seed, *keys)``.

    Streams for different keys never share state, so the order in which
    clients or trials run cannot change any drawn value.
    """
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)]))


def derive_seed(seed: int, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(0, 2**31 - 1))
