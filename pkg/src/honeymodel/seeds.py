"""Seed derivation.

Every random stream in a run hangs off one root seed. Sub-seeds are derived
by hashing a component label together with the root so that adding a new
consumer never shifts the stream of an existing one.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(root, *labels):
    """Return a 64-bit seed for ``labels`` under ``root``."""
    text = ":".join([str(int(root) & MASK64), *map(str, labels)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng(seed, *labels):
    if labels:
        seed = derive_seed(seed, *labels)
    return np.random.default_rng(int(seed) & MASK64)
