"""Deterministic seed derivation shared by every randomized stage.

Python's builtin hash() is salted per process, so all derived seeds go
through sha256 of a canonical string. This keeps generated datasets, batch
orders, and augmentation draws identical across runs and platforms.
"""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of ints/strings to a stable 63-bit seed."""
    key = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
