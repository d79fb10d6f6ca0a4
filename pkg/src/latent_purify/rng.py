"""Counter-based random streams derived from a single root seed.

Every random decision in the lab is drawn from a Philox stream whose key is
``blake2b(root_seed, purpose_label, index)``.  Streams with different labels
or indices are statistically independent, and re-creating a stream with the
same triple replays exactly the same draws.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_key(root_seed: int, label: str, index: int = 0) -> int:
    """128-bit Philox key for the stream ``(root_seed, label, index)``."""
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<Q", int(root_seed) & _MASK64))
    h.update(label.encode("utf-8"))
    h.update(b"\x00")
    h.update(struct.pack("<Q", int(index) & _MASK64))
    return int.from_bytes(h.digest(), "little")


def from_key(key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=key))


def stream(root_seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Fresh generator for the stream ``(root_seed, label, index)``."""
    return from_key(stream_key(root_seed, label, index))


def child_key(rng: np.random.Generator) -> int:
    """Draw a 128-bit key from ``rng`` to spawn a sub-stream."""
    lo, hi = rng.integers(0, 1 << 63, size=2, dtype=np.int64)
    return (int(hi) << 64) | int(lo)
