"""Semantic grouping: partition visual tokens by their nearest vocabulary
anchor under cosine similarity, with optional restriction to the largest
subsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evocomp.core import (
    AnchorSet,
    DataError,
    Group,
    GroupPartition,
    Sample,
    validate_anchors,
    validate_sample,
)


@dataclass(frozen=True)
class GroupingConfig:
    """Search-space restriction: keep only the K largest groups active.

    Exactly one of ``top_k`` (positive count) or ``top_fraction`` (in (0, 1])
    may be set; with neither, all groups stay active.
    """

    top_k: int | None = None
    top_fraction: float | None = None

    def __post_init__(self) -> None:
        if self.top_k is not None and self.top_fraction is not None:
            raise DataError("set top_k or top_fraction, not both")
        if self.top_k is not None and self.top_k <= 0:
            raise DataError("top_k must be positive")
        if self.top_fraction is not None and not 0.0 < self.top_fraction <= 1.0:
            raise DataError("top_fraction must lie in (0, 1]")


def round_half_away(x: float) -> int:
    """Round half away from zero; deterministic across platforms."""
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Standard cosine similarity; 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DataError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _similarities(vectors: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Cosine matrix between rows of vectors and rows of anchors; zero-norm
    rows get similarity 0 everywhere."""
    vn = np.linalg.norm(vectors, axis=1, keepdims=True)
    an = np.linalg.norm(anchors, axis=1, keepdims=True)
    safe_vn = np.where(vn == 0.0, 1.0, vn)
    safe_an = np.where(an == 0.0, 1.0, an)
    sims = (vectors / safe_vn) @ (anchors / safe_an).T
    sims[vn[:, 0] == 0.0, :] = 0.0
    sims[:, an[:, 0] == 0.0] = 0.0
    return sims


def nearest_anchor(v: np.ndarray, anchors: AnchorSet) -> int:
    """Index of the most-similar anchor; ties break toward the lowest index."""
    if anchors.c < 1:
        raise DataError("empty anchor set")
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    if v.shape[1] != anchors.d:
        raise DataError(f"width mismatch: token {v.shape[1]} vs anchors {anchors.d}")
    sims = _similarities(v, np.asarray(anchors.anchors, dtype=np.float64))[0]
    return int(np.argmax(sims))  # argmax returns the first (lowest) maximiser


def partition(sample: Sample, anchors: AnchorSet) -> GroupPartition:
    """Group tokens that share a nearest anchor; all groups start active.

    Groups come out ordered by their smallest member index, which fixes the
    sub-mask concatenation order for the search operators.
    """
    validate_sample(sample)
    validate_anchors(anchors)
    if sample.d != anchors.d:
        raise DataError(f"width mismatch: sample {sample.d} vs anchors {anchors.d}")
    sims = _similarities(
        np.asarray(sample.visual, dtype=np.float64),
        np.asarray(anchors.anchors, dtype=np.float64),
    )
    nearest = np.argmax(sims, axis=1)
    members: dict[int, list[int]] = {}
    for i, a in enumerate(nearest):
        members.setdefault(int(a), []).append(i)
    groups = sorted(
        (Group(anchor_id=a, members=tuple(ms)) for a, ms in members.items()),
        key=lambda g: g.members[0],
    )
    return GroupPartition(groups=tuple(groups), n=sample.n)


def restrict_top_groups(part: GroupPartition, cfg: GroupingConfig) -> GroupPartition:
    """Activate the K largest groups (by member count) and deactivate the rest.

    Size ties break toward the group with the smallest member index. For a
    fractional restriction, K = max(1, round(f * s)) clamped to [1, s].
    Membership never changes, only the active flags.
    """
    s = len(part.groups)
    if cfg.top_k is None and cfg.top_fraction is None:
        return part
    if cfg.top_k is not None:
        k = cfg.top_k
    else:
        k = max(1, min(s, round_half_away(cfg.top_fraction * s)))
    if k <= 0:
        raise DataError("restriction count must be positive")
    ranked = sorted(range(s), key=lambda i: (-len(part.groups[i].members), part.groups[i].members[0]))
    keep = set(ranked[: min(k, s)])
    groups = tuple(
        Group(anchor_id=g.anchor_id, members=g.members, active=(i in keep))
        for i, g in enumerate(part.groups)
    )
    return GroupPartition(groups=groups, n=part.n)
