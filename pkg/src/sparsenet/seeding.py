"""Named random streams derived from one experiment seed.

``stream(seed, "stage", 2, "prune")`` always yields the same generator for the
same path, independent of how many other streams were drawn before it, so
adding a stage does not perturb the randomness of earlier ones.
"""
import hashlib

import numpy as np


def _key(part) -> int:
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *path) -> int:
    """64-bit integer seed for APIs that take a plain int."""
    return int(stream(seed, *path).integers(0, 2**63 - 1))
