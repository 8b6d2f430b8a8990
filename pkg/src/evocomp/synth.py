"""Synthetic dataset families with known structure.

The planted family builds each token as its group's anchor plus bounded
noise, so nearest-anchor grouping provably recovers the generator's groups
(anchors are orthonormal, noise radius is far below the separation bound).
The token the planted scorer rewards additionally carries a small component
along a reserved direction orthogonal to every anchor, which is what makes
the supervised retention task learnable from the embeddings alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evocomp.core import (
    AnchorSet,
    DataError,
    Group,
    GroupPartition,
    LabelRecord,
    Sample,
    compose_mask,
)
from evocomp.scorers import planted_choice


@dataclass(frozen=True)
class PlantedDataset:
    samples: list[Sample]
    anchors: AnchorSet
    truth: list[LabelRecord]
    partition_groups: list[tuple[int, ...]]  # shared token-index layout


def _orthonormal_rows(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    if dim < count:
        raise DataError(f"need dim >= {count} for {count} orthonormal rows")
    raw = rng.normal(size=(dim, count))
    q, _ = np.linalg.qr(raw)
    return q.T[:count]


def _group_sizes(tokens: int, groups: int) -> list[int]:
    if groups < 1:
        raise DataError("need at least one group")
    if tokens < groups:
        raise DataError("need at least one token per group")
    base, rem = divmod(tokens, groups)
    return [base + (1 if j < rem else 0) for j in range(groups)]


def generator_partition(tokens: int, groups: int) -> GroupPartition:
    """The contiguous-block partition the planted generator lays tokens out in."""
    sizes = _group_sizes(tokens, groups)
    members = []
    offset = 0
    for size in sizes:
        members.append(tuple(range(offset, offset + size)))
        offset += size
    return GroupPartition(
        groups=tuple(Group(anchor_id=j, members=m) for j, m in enumerate(members)),
        n=tokens,
    )


def gen_planted(
    n_samples: int,
    tokens: int,
    groups: int,
    dim: int,
    seed: int,
    scorer_seed: int | None = None,
    text_tokens: int = 8,
    noise: float = 0.2,
    marker_scale: float = 0.25,
) -> PlantedDataset:
    """Planted-family dataset: grouping is recoverable and the planted
    scorer's optimum is marked in the embeddings.

    Recovery argument: with orthonormal anchors a_j and any perturbation p
    with |p| < 0.5, argmax_j cos(a_j + p, a_j) stays at j because the dot
    with the true anchor is >= 1 - |p| while any other is <= |p|. Here
    |p| <= noise + marker_scale = 0.45.
    """
    if n_samples < 1:
        raise DataError("need at least one sample")
    if noise + marker_scale >= 0.5:
        raise DataError("noise + marker_scale must stay below the 0.5 recovery bound")
    if scorer_seed is None:
        scorer_seed = seed
    rng = np.random.default_rng(seed)
    basis = _orthonormal_rows(groups + 1, dim, rng)
    anchors = AnchorSet(anchors=basis[:groups].copy())
    marker = basis[groups]
    part = generator_partition(tokens, groups)

    samples = []
    truth = []
    for i in range(n_samples):
        sample_id = f"s{i:05d}"
        visual = np.empty((tokens, dim), dtype=np.float64)
        planted = []
        for j, group in enumerate(part.groups):
            size = len(group.members)
            k_star = planted_choice(sample_id, scorer_seed, j, size)
            planted.append(k_star)
            for k, token_index in enumerate(group.members):
                direction = rng.normal(size=dim)
                direction /= np.linalg.norm(direction)
                row = anchors.anchors[j] + direction * (noise * rng.random())
                if k == k_star:
                    row = row + marker_scale * marker
                visual[token_index] = row
        text = rng.normal(size=(text_tokens, dim))
        sample = Sample(id=sample_id, visual=visual, text=text)
        samples.append(sample)
        truth.append(
            LabelRecord(
                sample_id=sample_id,
                mask=compose_mask(part, tuple(planted)),
                loss=0.0,
                partition_digest=part.digest(),
                scorer_id=f"planted:{scorer_seed}",
                seed=scorer_seed,
            )
        )
    return PlantedDataset(
        samples=samples,
        anchors=anchors,
        truth=truth,
        partition_groups=[g.members for g in part.groups],
    )


def gen_pooled(
    n_samples: int,
    tokens: int,
    dim: int,
    seed: int,
    text_tokens: int = 8,
    anchor_count: int = 6,
) -> tuple[list[Sample], AnchorSet]:
    """Unstructured Gaussian dataset for the pooled scorer; no ground truth."""
    if n_samples < 1:
        raise DataError("need at least one sample")
    if text_tokens < 1:
        raise DataError("pooled samples need at least one text token")
    rng = np.random.default_rng(seed)
    anchors = AnchorSet(anchors=rng.normal(size=(anchor_count, dim)))
    samples = [
        Sample(
            id=f"s{i:05d}",
            visual=rng.normal(size=(tokens, dim)),
            text=rng.normal(size=(text_tokens, dim)),
        )
        for i in range(n_samples)
    ]
    return samples, anchors
