import hypothesis
import numpy as np
import pytest

from evocomp.core import AnchorSet, Group, GroupPartition, Sample

hypothesis.settings.register_profile("fast", max_examples=20)
hypothesis.settings.register_profile("thorough", max_examples=300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_sample(rng):
    return Sample(id="fix", visual=rng.normal(size=(6, 8)), text=rng.normal(size=(3, 8)))


@pytest.fixture
def small_partition():
    return GroupPartition(
        groups=(
            Group(anchor_id=0, members=(0, 1, 2)),
            Group(anchor_id=1, members=(3, 4)),
            Group(anchor_id=2, members=(5,)),
        ),
        n=6,
    )


@pytest.fixture
def anchors(rng):
    return AnchorSet(anchors=rng.normal(size=(4, 8)))
