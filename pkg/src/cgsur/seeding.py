"""Deterministic seed derivation.

All randomness in a run descends from a single root seed. Child streams are
derived by hashing the root together with a label path, so adding a new
consumer never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *path: object) -> int:
    """Map (root, label path) to a stable 64-bit seed."""
    key = repr((int(root),) + tuple(str(p) for p in path)).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(root: int, *path: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *path))
