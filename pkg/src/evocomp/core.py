"""Domain types shared by the whole pipeline: samples, anchor sets, group
partitions, retention masks, and label records, plus mask composition.

All matrices are float32 on disk and promoted to float64 for computation.
Every type here is immutable after construction and safe to share across
worker threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    """Raised when an input violates a documented invariant or file contract."""


@dataclass(frozen=True)
class Sample:
    """One training instance: visual token embeddings plus text token embeddings.

    ``visual`` is (n, d), ``text`` is (m, d); m may be zero. Text holds the
    input prompt only; any gold response handling belongs to the scorer.
    """

    id: str
    visual: np.ndarray
    text: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.visual.shape[0]

    @property
    def m(self) -> int:
        return self.text.shape[0]

    @property
    def d(self) -> int:
        return self.visual.shape[1]


@dataclass(frozen=True)
class AnchorSet:
    """Vocabulary embeddings used as cluster centers, shape (c, d)."""

    anchors: np.ndarray

    @property
    def c(self) -> int:
        return self.anchors.shape[0]

    @property
    def d(self) -> int:
        return self.anchors.shape[1]


@dataclass(frozen=True)
class Group:
    """One semantic subset: the anchor it formed around and its member token
    indices (sorted ascending)."""

    anchor_id: int
    members: tuple[int, ...]
    active: bool = True


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint subsets of visual-token indices, ordered by smallest member.

    ``active`` flags implement search-space restriction: inactive groups
    contribute all-zero sub-masks and their tokens are always dropped.
    """

    groups: tuple[Group, ...]
    n: int

    def active_groups(self) -> list[Group]:
        return [g for g in self.groups if g.active]

    @property
    def num_active(self) -> int:
        return sum(1 for g in self.groups if g.active)

    def digest(self) -> str:
        """Canonical SHA-256 over the group structure, used in label records."""
        payload = json.dumps(
            {
                "n": self.n,
                "groups": [
                    [g.anchor_id, list(g.members), bool(g.active)] for g in self.groups
                ],
            },
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Mask:
    """Binary retention vector over the n visual tokens (1 = keep)."""

    bits: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def retained(self) -> int:
        return sum(self.bits)

    def digest(self) -> bytes:
        return bytes(self.bits)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.uint8)


@dataclass(frozen=True)
class LabelRecord:
    """Search output for one sample: the best mask found and its loss."""

    sample_id: str
    mask: Mask
    loss: float
    partition_digest: str
    scorer_id: str
    seed: int


def validate_sample(sample: Sample) -> None:
    """Raise DataError unless all Sample invariants hold."""
    if sample.visual.ndim != 2 or sample.text.ndim != 2:
        raise DataError(f"sample {sample.id!r}: visual and text must be 2-D matrices")
    n, d = sample.visual.shape
    if n < 1:
        raise DataError(f"sample {sample.id!r}: needs at least one visual token")
    if d < 1:
        raise DataError(f"sample {sample.id!r}: embedding width must be >= 1")
    if sample.text.shape[0] > 0 and sample.text.shape[1] != d:
        raise DataError(
            f"sample {sample.id!r}: text width {sample.text.shape[1]} != visual width {d}"
        )
    if not np.isfinite(sample.visual).all():
        raise DataError(f"sample {sample.id!r}: non-finite visual entry")
    if sample.text.size and not np.isfinite(sample.text).all():
        raise DataError(f"sample {sample.id!r}: non-finite text entry")


def validate_anchors(anchors: AnchorSet) -> None:
    if anchors.anchors.ndim != 2 or anchors.c < 1:
        raise DataError("anchor set must be a non-empty 2-D matrix")
    if not np.isfinite(anchors.anchors).all():
        raise DataError("non-finite anchor entry")
    norms = np.linalg.norm(anchors.anchors, axis=1)
    if np.any(norms == 0.0):
        raise DataError("anchor rows must not be all-zero")


def validate_partition(part: GroupPartition) -> None:
    """Check disjointness, coverage, ordering, and the active-flag invariant."""
    seen: set[int] = set()
    prev_first = -1
    for g in part.groups:
        if not g.members:
            raise DataError("empty group")
        members = list(g.members)
        if members != sorted(members):
            raise DataError("group members must be sorted ascending")
        if members[0] <= prev_first:
            raise DataError("groups must be ordered by smallest member index")
        prev_first = members[0]
        for i in members:
            if i in seen:
                raise DataError(f"token {i} appears in more than one group")
            seen.add(i)
    if seen != set(range(part.n)):
        raise DataError("groups must cover exactly the token indices 0..n-1")
    if part.num_active < 1:
        raise DataError("at least one group must be active")


def validate_mask(mask: Mask, part: GroupPartition) -> None:
    """Check the one-hot-per-active-group structure against a partition."""
    if mask.n != part.n:
        raise DataError(f"mask length {mask.n} != token count {part.n}")
    if any(b not in (0, 1) for b in mask.bits):
        raise DataError("mask bits must be 0 or 1")
    for g in part.groups:
        s = sum(mask.bits[i] for i in g.members)
        if g.active and s != 1:
            raise DataError(f"active group at anchor {g.anchor_id} retains {s} tokens, want 1")
        if not g.active and s != 0:
            raise DataError(f"inactive group at anchor {g.anchor_id} retains {s} tokens, want 0")


def compose_mask(part: GroupPartition, choices: tuple[int, ...] | list[int]) -> Mask:
    """Build the global mask from one chosen member position per active group.

    ``choices[k]`` indexes into the member list of the k-th active group in
    canonical order. Inactive groups contribute zeros.
    """
    active = part.active_groups()
    if len(choices) != len(active):
        raise DataError(f"got {len(choices)} choices for {len(active)} active groups")
    bits = [0] * part.n
    for g, c in zip(active, choices):
        if not 0 <= c < len(g.members):
            raise DataError(f"choice {c} out of range for group of size {len(g.members)}")
        bits[g.members[c]] = 1
    return Mask(bits=tuple(bits))


def decompose_mask(mask: Mask, part: GroupPartition) -> tuple[int, ...]:
    """Read back the per-active-group member positions of a composed mask."""
    validate_mask(mask, part)
    choices = []
    for g in part.active_groups():
        for k, i in enumerate(g.members):
            if mask.bits[i]:
                choices.append(k)
                break
    return tuple(choices)


def apply_mask(sample: Sample, mask: Mask) -> tuple[np.ndarray, list[int]]:
    """Keep exactly the visual rows with bit 1, preserving row order."""
    if mask.n != sample.n:
        raise DataError(f"mask length {mask.n} != sample token count {sample.n}")
    kept = [i for i, b in enumerate(mask.bits) if b]
    return sample.visual[kept], kept
