"""Seed derivation: one root seed, every consumer gets a labelled child seed."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Hash ``root`` together with ``labels`` into a 64-bit seed.

    Labels are stringified, so ``derive_seed(1, "client", 3, 7)`` is stable
    across processes and platforms.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


def rng_for(root: int, *labels) -> np.random.Generator:
    """Counter-based (Philox) generator keyed on ``(root, *labels)``."""
    return np.random.Generator(np.random.Philox(key=derive_seed(root, *labels)))
