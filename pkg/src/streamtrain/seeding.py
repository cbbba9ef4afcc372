"""Named sub-seed derivation so every component draws from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, name: str) -> int:
    """Derive a stable 64-bit sub-seed from a master seed and a component name."""
    digest = hashlib.blake2b(
        f"{master_seed}:{name}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def rng_for(master_seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, name)))
