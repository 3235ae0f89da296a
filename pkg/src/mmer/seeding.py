"""Per-item seed derivation so parallel work stays deterministic."""

from __future__ import annotations

import hashlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(k).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *keys) -> int:
    """64-bit seed for the work item identified by ``keys`` under the master ``seed``."""
    ss = np.random.SeedSequence([_key(seed)] + [_key(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])
