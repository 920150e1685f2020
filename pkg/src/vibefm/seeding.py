"""Deterministic seed derivation.

Every random decision in the toolkit draws from a generator obtained via
``make_rng(root, *path)`` where ``path`` names the decision site (for
example ``("augment", epoch, sample_index, view)``).  Separate sites get
statistically independent streams, and the same ``(root, path)`` always
yields the same stream regardless of call order, which is what makes
single-threaded runs bit-reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *path: object) -> int:
    """Hash ``root`` and the path components into a 64-bit seed."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for part in path:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little")


def make_rng(root: int, *path: object) -> np.random.Generator:
    """Return a fresh generator for the named sub-stream."""
    return np.random.default_rng(derive_seed(root, *path))
