"""Evolutionary labeling and supervised training for visual-token retention masks."""

__version__ = "0.1.0"

from evocomp.core import (
    AnchorSet,
    GroupPartition,
    LabelRecord,
    Mask,
    Sample,
    apply_mask,
    compose_mask,
    decompose_mask,
    validate_sample,
)
from evocomp.grouping import (
    GroupingConfig,
    cosine_similarity,
    nearest_anchor,
    partition,
    restrict_top_groups,
)

__all__ = [
    "AnchorSet",
    "GroupPartition",
    "GroupingConfig",
    "LabelRecord",
    "Mask",
    "Sample",
    "apply_mask",
    "compose_mask",
    "cosine_similarity",
    "decompose_mask",
    "nearest_anchor",
    "partition",
    "restrict_top_groups",
    "validate_sample",
]
