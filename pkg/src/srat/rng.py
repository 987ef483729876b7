"""Counter-based random streams.

Every stream is a Philox generator keyed by the SHA-256 digest of its
(seed, purpose, index...) label, so any draw in the project is a pure
function of that label and streams never collide across purposes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def philox_key(*parts) -> np.ndarray:
    label = ":".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(label).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def stream(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=philox_key(*parts)))


def derive_seed(*parts) -> int:
    """A 31-bit integer seed derived from a label (for config surfaces)."""
    label = ":".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(label).digest()[:4], "little") & 0x7FFFFFFF
