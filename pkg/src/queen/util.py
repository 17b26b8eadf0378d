"""Small shared helpers: seed derivation and canonical JSON."""

from __future__ import annotations

import json
import zlib

import numpy as np


def derive_seed(seed: int, *parts) -> int:
    """Deterministic child seed from a base seed and a tag path.

    String parts hash through crc32 so the derivation is stable across
    runs and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode()))
        else:
            entropy.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def derive_rng(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *parts))


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, no whitespace, repr floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
