"""Deterministic seed derivation.

Every random decision in the package flows from a user-supplied integer seed
through ``child_seed``/``generator``, so runs are reproducible across
processes and platforms (numpy's PCG64 streams are platform independent).
String key parts are folded in via crc32, which is stable everywhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def child_seed(root: int, *parts: int | str) -> int:
    """Derive a child seed from a root seed and a key path."""
    ss = np.random.SeedSequence([_encode(root), *(_encode(p) for p in parts)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator(root: int, *parts: int | str) -> np.random.Generator:
    """A fresh PCG64 generator for the given key path."""
    return np.random.default_rng(child_seed(root, *parts))
