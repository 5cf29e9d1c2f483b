"""Deterministic seed derivation.

Every run takes a single root seed. Each consumer of randomness (mask
sampler, parameter init, load-profile noise, attack sampler, ...) derives
its own child seed from the root plus a string path, so adding a new
consumer never shifts the streams of existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels: object) -> int:
    """Derive a 63-bit child seed from a root seed and a label path."""
    h = hashlib.sha256()
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rng(root: int, *labels: object) -> np.random.Generator:
    """A PCG64 generator seeded from ``derive_seed(root, *labels)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))
