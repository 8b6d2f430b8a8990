"""Keyed SHA-256 derivations used wherever behaviour must be reproducible
from (string, seed) pairs alone: synthetic scorer instances, validation
splits, and the pooled scorer's projection matrix.

Every derivation is domain-separated by a tag so independent consumers can
never collide, and everything is defined in terms of byte strings so a
re-implementation in another process (or language) produces identical values.
"""

from __future__ import annotations

import hashlib
import struct

_U64 = 2**64


def keyed_digest(tag: str, seed: int, *parts: bytes) -> bytes:
    """32-byte SHA-256 digest of tag || seed || parts."""
    h = hashlib.sha256()
    h.update(tag.encode("utf-8"))
    h.update(struct.pack("<Q", seed % _U64))
    for part in parts:
        h.update(part)
    return h.digest()


def keyed_u64(tag: str, seed: int, *parts: bytes) -> int:
    """First 8 digest bytes as a little-endian unsigned integer."""
    return struct.unpack("<Q", keyed_digest(tag, seed, *parts)[:8])[0]


def keyed_unit(tag: str, seed: int, *parts: bytes) -> float:
    """Uniform float in [0, 1) derived from the keyed digest."""
    return keyed_u64(tag, seed, *parts) / _U64


def u32_bytes(value: int) -> bytes:
    return struct.pack("<I", value)


def split_bucket(sample_id: str, buckets: int = 10) -> int:
    """Stable bucket in [0, buckets) for validation splits keyed by sample id."""
    return keyed_u64("evocomp/split", 0, sample_id.encode("utf-8")) % buckets
