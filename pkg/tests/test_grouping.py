import numpy as np
import pytest
from hypothesis import given, strategies as st

from evocomp.core import AnchorSet, DataError, Group, GroupPartition, Sample
from evocomp.grouping import (
    GroupingConfig,
    cosine_similarity,
    nearest_anchor,
    partition,
    restrict_top_groups,
    round_half_away,
)


class TestCosine:
    def test_identical_unit_vectors(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_hand_value(self):
        # 1/sqrt(2), evaluated by hand
        got = cosine_similarity(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert got == pytest.approx(0.7071067811865475, rel=1e-12)

    def test_zero_norm_is_zero(self):
        assert cosine_similarity(np.zeros(3), np.array([1.0, 2.0, 3.0])) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            cosine_similarity(np.zeros(3), np.zeros(4))


class TestNearestAnchor:
    ANCHORS = AnchorSet(anchors=np.array([[1.0, 0.0], [0.0, 1.0]]))

    def test_exact_match(self):
        assert nearest_anchor(np.array([1.0, 0.0]), self.ANCHORS) == 0

    def test_tie_breaks_low(self):
        assert nearest_anchor(np.array([1.0, 1.0]), self.ANCHORS) == 0

    def test_direct_comparison(self):
        assert nearest_anchor(np.array([0.1, 0.9]), self.ANCHORS) == 1

    def test_empty_anchor_set(self):
        with pytest.raises(DataError):
            nearest_anchor(np.array([1.0]), AnchorSet(anchors=np.zeros((0, 1))))

    @given(scale=st.floats(min_value=1e-6, max_value=1e6), seed=st.integers(0, 1000))
    def test_scale_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        anchors = AnchorSet(anchors=rng.normal(size=(5, 4)))
        v = rng.normal(size=4)
        assert nearest_anchor(v, anchors) == nearest_anchor(scale * v, anchors)


class TestPartition:
    def test_two_groups(self):
        anchors = AnchorSet(anchors=np.array([[1.0, 0.0], [0.0, 1.0]]))
        visual = np.array([[2.0, 0.1], [3.0, 0.0], [0.0, 1.0], [0.1, 2.0]])
        sample = Sample(id="s", visual=visual, text=np.zeros((0, 2)))
        part = partition(sample, anchors)
        assert [g.members for g in part.groups] == [(0, 1), (2, 3)]
        assert all(g.active for g in part.groups)

    def test_single_token(self):
        anchors = AnchorSet(anchors=np.array([[1.0, 0.0], [0.0, 1.0]]))
        sample = Sample(id="s", visual=np.array([[1.0, 0.2]]), text=np.zeros((0, 2)))
        part = partition(sample, anchors)
        assert len(part.groups) == 1
        assert part.groups[0].members == (0,)

    def test_identical_tokens_one_group(self):
        anchors = AnchorSet(anchors=np.array([[1.0, 0.0], [0.0, 1.0]]))
        sample = Sample(id="s", visual=np.ones((5, 2)), text=np.zeros((0, 2)))
        part = partition(sample, anchors)
        assert len(part.groups) == 1
        assert part.groups[0].members == tuple(range(5))

    @given(seed=st.integers(0, 500), n=st.integers(1, 20), c=st.integers(1, 6))
    def test_true_partition(self, seed, n, c):
        rng = np.random.default_rng(seed)
        anchors = AnchorSet(anchors=rng.normal(size=(c, 5)))
        sample = Sample(id="s", visual=rng.normal(size=(n, 5)), text=np.zeros((0, 5)))
        part = partition(sample, anchors)
        seen = sorted(i for g in part.groups for i in g.members)
        assert seen == list(range(n))


def _sized_partition(sizes):
    groups = []
    offset = 0
    for j, size in enumerate(sizes):
        groups.append(Group(anchor_id=j, members=tuple(range(offset, offset + size))))
        offset += size
    return GroupPartition(groups=tuple(groups), n=offset)


class TestRestrict:
    def test_size_tie_earliest_member(self):
        part = _sized_partition([5, 3, 3, 1])
        out = restrict_top_groups(part, GroupingConfig(top_k=2))
        assert [g.active for g in out.groups] == [True, True, False, False]

    def test_fraction_rounding(self):
        part = _sized_partition([1] * 36)
        out = restrict_top_groups(part, GroupingConfig(top_fraction=0.111))
        assert sum(g.active for g in out.groups) == 4

    def test_k_at_least_s_all_active(self):
        part = _sized_partition([2, 2])
        out = restrict_top_groups(part, GroupingConfig(top_k=10))
        assert all(g.active for g in out.groups)

    def test_none_is_identity(self):
        part = _sized_partition([2, 2])
        assert restrict_top_groups(part, GroupingConfig()) is part

    def test_bad_k(self):
        with pytest.raises(DataError):
            GroupingConfig(top_k=0)

    def test_both_variants_rejected(self):
        with pytest.raises(DataError):
            GroupingConfig(top_k=2, top_fraction=0.5)

    @given(
        sizes=st.lists(st.integers(1, 6), min_size=1, max_size=8),
        k=st.integers(1, 10),
    )
    def test_membership_unchanged_and_k_largest(self, sizes, k):
        part = _sized_partition(sizes)
        out = restrict_top_groups(part, GroupingConfig(top_k=k))
        assert [g.members for g in out.groups] == [g.members for g in part.groups]
        active_sizes = sorted((len(g.members) for g in out.groups if g.active), reverse=True)
        want = sorted(sizes, reverse=True)[: min(k, len(sizes))]
        assert active_sizes == want


def test_round_half_away():
    assert round_half_away(0.5) == 1
    assert round_half_away(1.5) == 2
    assert round_half_away(2.4) == 2
    assert round_half_away(-0.5) == -1
    assert round_half_away(3.996) == 4
