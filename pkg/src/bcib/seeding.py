"""Sub-seed derivation.

Every random stream is keyed by the run seed plus a purpose string, e.g.
``derive_seed(0, "policy-init")``: the first 8 bytes of
``sha256(f"{seed}/{purpose}/...")`` read as a little-endian uint64. Streams
for different purposes never share state, so any component can be re-run in
isolation and reproduce its numbers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *purpose: object) -> int:
    key = "/".join([str(int(seed))] + [str(p) for p in purpose])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def rng_for(seed: int, *purpose: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))
