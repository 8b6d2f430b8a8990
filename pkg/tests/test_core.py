import numpy as np
import pytest
from hypothesis import given, strategies as st

from evocomp.core import (
    DataError,
    Group,
    GroupPartition,
    Mask,
    Sample,
    apply_mask,
    compose_mask,
    decompose_mask,
    validate_mask,
    validate_partition,
    validate_sample,
)


def make_sample(visual, text=None, sid="s"):
    visual = np.asarray(visual, dtype=np.float64)
    if text is None:
        text = np.zeros((0, visual.shape[1]))
    return Sample(id=sid, visual=visual, text=np.asarray(text, dtype=np.float64))


class TestValidateSample:
    def test_well_formed(self, rng):
        validate_sample(make_sample(rng.normal(size=(3, 4)), rng.normal(size=(2, 4))))

    def test_width_mismatch(self, rng):
        with pytest.raises(DataError, match="width"):
            validate_sample(make_sample(rng.normal(size=(3, 4)), rng.normal(size=(2, 5))))

    def test_non_finite(self, rng):
        visual = rng.normal(size=(3, 4))
        visual[1, 2] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            validate_sample(make_sample(visual))

    def test_empty_visual(self):
        with pytest.raises(DataError):
            validate_sample(make_sample(np.zeros((0, 4))))

    def test_text_may_be_empty(self, rng):
        validate_sample(make_sample(rng.normal(size=(3, 4))))


class TestComposeMask:
    def test_two_groups(self):
        part = GroupPartition(
            groups=(Group(0, (0, 1)), Group(1, (2, 3))), n=4
        )
        assert compose_mask(part, (1, 0)).bits == (0, 1, 1, 0)

    def test_singleton(self):
        part = GroupPartition(groups=(Group(0, (0,)),), n=1)
        assert compose_mask(part, (0,)).bits == (1,)

    def test_inactive_group_is_zero(self):
        part = GroupPartition(
            groups=(Group(0, (0, 1)), Group(1, (2, 3), active=False)), n=4
        )
        mask = compose_mask(part, (0,))
        assert mask.bits[2] == 0 and mask.bits[3] == 0
        assert mask.retained == 1

    def test_choice_out_of_range(self, small_partition):
        with pytest.raises(DataError, match="out of range"):
            compose_mask(small_partition, (3, 0, 0))

    def test_wrong_choice_count(self, small_partition):
        with pytest.raises(DataError):
            compose_mask(small_partition, (0, 0))


class TestApplyMask:
    def test_identity(self, small_sample):
        reduced, kept = apply_mask(small_sample, Mask(bits=(1,) * 6))
        assert np.array_equal(reduced, small_sample.visual)
        assert kept == list(range(6))

    def test_empty(self, small_sample):
        reduced, kept = apply_mask(small_sample, Mask(bits=(0,) * 6))
        assert reduced.shape == (0, 8)
        assert kept == []

    def test_filter(self, rng):
        sample = make_sample(rng.normal(size=(3, 4)))
        reduced, kept = apply_mask(sample, Mask(bits=(1, 0, 1)))
        assert kept == [0, 2]
        assert np.array_equal(reduced, sample.visual[[0, 2]])

    def test_length_mismatch(self, small_sample):
        with pytest.raises(DataError, match="length"):
            apply_mask(small_sample, Mask(bits=(1, 0)))


@st.composite
def partitions(draw):
    n_groups = draw(st.integers(1, 5))
    sizes = [draw(st.integers(1, 4)) for _ in range(n_groups)]
    n = sum(sizes)
    indices = list(range(n))
    rnd = draw(st.randoms(use_true_random=False))
    rnd.shuffle(indices)
    groups = []
    offset = 0
    active_flags = [draw(st.booleans()) for _ in range(n_groups)]
    if not any(active_flags):
        active_flags[0] = True
    for size, active in zip(sizes, active_flags):
        groups.append((tuple(sorted(indices[offset : offset + size])), active))
        offset += size
    groups.sort(key=lambda g: g[0][0])
    return GroupPartition(
        groups=tuple(Group(anchor_id=j, members=m, active=a) for j, (m, a) in enumerate(groups)),
        n=n,
    )


@given(part=partitions(), data=st.data())
def test_compose_decompose_roundtrip(part, data):
    validate_partition(part)
    choices = tuple(
        data.draw(st.integers(0, len(g.members) - 1)) for g in part.active_groups()
    )
    mask = compose_mask(part, choices)
    validate_mask(mask, part)
    assert decompose_mask(mask, part) == choices
    assert mask.retained == part.num_active


@given(part=partitions(), data=st.data())
def test_apply_mask_keeps_order(part, data):
    choices = tuple(
        data.draw(st.integers(0, len(g.members) - 1)) for g in part.active_groups()
    )
    mask = compose_mask(part, choices)
    sample = make_sample(np.arange(part.n * 2, dtype=np.float64).reshape(part.n, 2))
    _, kept = apply_mask(sample, mask)
    assert kept == sorted(kept)
    assert len(kept) == len(set(kept))


def test_partition_digest_distinguishes_active_flags(small_partition):
    other = GroupPartition(
        groups=tuple(
            Group(g.anchor_id, g.members, active=(i != 2))
            for i, g in enumerate(small_partition.groups)
        ),
        n=small_partition.n,
    )
    assert small_partition.digest() != other.digest()


def test_validate_partition_rejects_overlap():
    part = GroupPartition(groups=(Group(0, (0, 1)), Group(1, (1, 2))), n=3)
    with pytest.raises(DataError):
        validate_partition(part)


def test_validate_partition_rejects_gap():
    part = GroupPartition(groups=(Group(0, (0,)), Group(1, (2,))), n=3)
    with pytest.raises(DataError):
        validate_partition(part)
