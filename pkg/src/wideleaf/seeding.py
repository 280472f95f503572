"""Per-entity deterministic random streams.

Every random draw in the toolkit comes from a stream derived by hashing a
root seed together with the entity it concerns (scene id, leaf id, purpose
tag). Execution order and parallelism therefore never change results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    key = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


def rng_stream(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
