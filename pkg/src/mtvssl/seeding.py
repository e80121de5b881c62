"""Deterministic seed derivation.

Workers derive their own stream from ``(global_seed, item_index)`` so results
never depend on scheduling order. Hashing goes through sha256 rather than
Python's builtin ``hash`` so streams are stable across processes and platforms.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Collapse a tuple of ints/strings into a stable 63-bit seed."""
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(*parts) -> np.random.Generator:
    """Independent numpy Generator keyed by the given parts."""
    return np.random.default_rng(derive_seed(*parts))


def canonical_hash(obj) -> str:
    """Short stable digest of a JSON-serializable object."""
    import json

    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
