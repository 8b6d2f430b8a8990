import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evocomp.core import DataError
from evocomp.losses import (
    GhmConfig,
    GhmState,
    LossBatch,
    bce_elementwise,
    ce_loss,
    cs_grad_reps,
    cs_loss,
    focal_grad_probs,
    focal_loss,
    ghm_c_grad_probs,
    ghm_c_loss,
    ghm_weights,
    ghm_weights_unit_region,
    gradient_density_exact,
    gradient_norms,
    total_loss,
    unit_regions,
)

# Frozen by an independent scalar evaluation of the density and loss formulas
# before this module existed.
GHM_HAND_VALUE = 0.30470255679415414


def batch(probs, labels, reps=None):
    return LossBatch(probs=np.asarray(probs, float), labels=np.asarray(labels, float), reps=reps)


class TestGradientNorms:
    def test_direct(self):
        got = gradient_norms(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
        assert got == pytest.approx([0.1, 0.2], rel=1e-15)

    def test_clamp_boundary(self):
        b = batch([1.0, 0.0], [1, 0])
        g = gradient_norms(b.probs, b.labels)
        assert np.all(g == pytest.approx(1e-7, rel=1e-9))

    def test_half_symmetry(self):
        g = gradient_norms(np.array([0.5, 0.5]), np.array([0.0, 1.0]))
        assert np.all(g == 0.5)


class TestExactDensity:
    def test_two_coincident_points(self):
        gd = gradient_density_exact(np.array([0.5, 0.5]), 0.1)
        assert gd == pytest.approx([20.0, 20.0], rel=1e-12)

    def test_left_clipped_singleton(self):
        gd = gradient_density_exact(np.array([0.0]), 0.1)
        assert gd == pytest.approx([20.0], rel=1e-12)

    def test_isolated_points(self):
        gd = gradient_density_exact(np.array([0.1, 0.9]), 0.01)
        assert gd == pytest.approx([1 / 0.01, 1 / 0.01], rel=1e-12)

    def test_window_is_half_open(self):
        # g_k on the right edge must not count
        gd = gradient_density_exact(np.array([0.5, 0.55]), 0.1)
        counts = gd * np.array([0.1, 0.1])
        assert counts[0] == pytest.approx(1.0, rel=1e-9)


class TestUnitRegion:
    def test_hand_beta_vector(self):
        beta = ghm_weights_unit_region(np.array([0.05, 0.05, 0.05, 0.95]), 10)
        assert beta.tolist() == [4 / 30, 4 / 30, 4 / 30, 4 / 10]

    def test_single_region_all_tokens(self):
        beta = ghm_weights_unit_region(np.full(7, 0.31), 10)
        assert np.all(beta == 1 / 10)

    def test_g_one_clamps_to_last_region(self):
        assert unit_regions(np.array([1.0]), 10)[0] == 9

    @given(seed=st.integers(0, 500), bins=st.integers(1, 50))
    @settings(max_examples=60)
    def test_same_region_equal_beta_and_positive(self, seed, bins):
        rng = np.random.default_rng(seed)
        g = rng.random(20)
        beta = ghm_weights_unit_region(g, bins)
        regions = unit_regions(g, bins)
        assert np.all(beta > 0)
        for r in set(regions.tolist()):
            vals = beta[regions == r]
            assert np.all(vals == vals[0])

    def test_monotone_reweighting(self):
        g = np.array([0.05] * 5 + [0.95] * 2)
        beta = ghm_weights_unit_region(g, 10)
        assert beta[-1] > beta[0]

    def test_momentum_state(self):
        state = GhmState()
        g1 = np.array([0.05, 0.05, 0.95])
        ghm_weights_unit_region(g1, 10, state=state, momentum=0.5)
        first = state.ema_counts.copy()
        ghm_weights_unit_region(np.array([0.05, 0.95, 0.95]), 10, state=state, momentum=0.5)
        assert state.ema_counts[0] == pytest.approx(0.5 * first[0] + 0.5 * 1)

    def test_momentum_requires_unit_region(self):
        with pytest.raises(DataError):
            GhmConfig(mode="exact", epsilon=0.1, momentum=0.5)


class TestGhmLoss:
    def test_hand_value(self):
        b = batch([0.05, 0.05, 0.05, 0.05], [0, 0, 0, 1])
        got = ghm_c_loss(b, GhmConfig(bins=10))
        assert got == pytest.approx(GHM_HAND_VALUE, rel=1e-12)

    def test_perfect_predictions_near_zero(self):
        b = batch([1e-9, 1.0 - 1e-9], [0, 1])
        assert ghm_c_loss(b, GhmConfig(bins=10)) < 1e-5

    def test_single_token_unit_region(self):
        b = batch([0.3], [1])
        got = ghm_c_loss(b, GhmConfig(bins=25))
        assert got == pytest.approx(-math.log(0.3) / 25, rel=1e-12)

    def test_exact_mode_default_eps(self):
        cfg = GhmConfig(mode="exact", bins=20)
        assert cfg.eps == 1 / 20


class TestCsLoss:
    def test_orthogonal_pair(self):
        b = batch([0.5, 0.5], [0, 1], reps=np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert cs_loss(b) == 0.0

    def test_identical_vectors(self):
        b = batch([0.5, 0.5], [0, 1], reps=np.array([[2.0, 1.0], [2.0, 1.0]]))
        assert cs_loss(b) == pytest.approx(1.0, rel=1e-12)

    def test_hand_value(self):
        reps = np.array([[1.0, 0.0], [0.0, 1.0], [1 / math.sqrt(2), 1 / math.sqrt(2)]])
        b = batch([0.5] * 3, [0, 0, 1], reps=reps)
        assert cs_loss(b) == pytest.approx(1 / math.sqrt(2), rel=1e-12)

    def test_empty_side_is_zero(self):
        b = batch([0.5, 0.5], [0, 0], reps=np.eye(2))
        assert cs_loss(b) == 0.0

    @given(seed=st.integers(0, 300), scale=st.floats(0.1, 10))
    @settings(max_examples=40)
    def test_rescaling_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        reps = rng.normal(size=(6, 4))
        labels = np.array([0, 0, 0, 1, 1, 1.0])
        base = cs_loss(batch([0.5] * 6, labels, reps=reps))
        reps2 = reps.copy()
        reps2[2] *= scale
        assert cs_loss(batch([0.5] * 6, labels, reps=reps2)) == pytest.approx(base, rel=1e-9)

    @given(seed=st.integers(0, 300))
    @settings(max_examples=40)
    def test_swap_symmetry_within_set(self, seed):
        rng = np.random.default_rng(seed)
        reps = rng.normal(size=(5, 3))
        labels = np.array([0, 0, 1, 1, 1.0])
        base = cs_loss(batch([0.5] * 5, labels, reps=reps))
        swapped = reps.copy()
        swapped[[0, 1]] = swapped[[1, 0]]
        assert cs_loss(batch([0.5] * 5, labels, reps=swapped)) == pytest.approx(base, rel=1e-12)


class TestTotalAndAblations:
    def test_alpha_zero_equals_ghm(self, rng):
        for _ in range(50):
            probs = rng.uniform(0.01, 0.99, size=12)
            labels = (rng.random(12) < 0.3).astype(float)
            b = batch(probs, labels, reps=rng.normal(size=(12, 4)))
            assert total_loss(b, GhmConfig(bins=10), alpha=0.0) == ghm_c_loss(b, GhmConfig(bins=10))

    def test_orthogonal_reps_alpha_irrelevant(self):
        b = batch([0.4, 0.6], [0, 1], reps=np.array([[3.0, 0.0], [0.0, 2.0]]))
        cfg = GhmConfig(bins=10)
        for alpha in (0.0, 0.5, 1.0, 7.0):
            assert total_loss(b, cfg, alpha=alpha) == ghm_c_loss(b, cfg)

    def test_focal_gamma_zero_equals_ce(self, rng):
        for _ in range(50):
            probs = rng.uniform(0.01, 0.99, size=9)
            labels = (rng.random(9) < 0.5).astype(float)
            b = batch(probs, labels)
            assert focal_loss(b, gamma=0.0, alpha_f=1.0) == ce_loss(b)

    def test_ce_hand_value(self):
        assert ce_loss(batch([0.5], [1])) == pytest.approx(math.log(2.0), rel=1e-12)

    def test_focal_perfect_prediction(self):
        assert focal_loss(batch([1.0], [1]), gamma=2.0, alpha_f=1.0) < 1e-12


def _fd(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy(); xp.flat[i] += h
        xm = x.copy(); xm.flat[i] -= h
        grad.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return grad


class TestAnalyticGradients:
    def test_ghm_grad_probs_matches_fd(self, rng):
        cfg = GhmConfig(bins=10)
        for trial in range(10):
            probs = rng.uniform(0.05, 0.95, size=8)
            labels = (rng.random(8) < 0.4).astype(float)
            b = batch(probs, labels)
            beta = ghm_weights(gradient_norms(b.probs, b.labels), cfg)
            analytic = ghm_c_grad_probs(b, cfg, beta=beta)
            numeric = _fd(lambda p: ghm_c_loss(batch(p, labels), cfg, beta=beta), b.probs.copy())
            err = np.abs(analytic - numeric) / np.maximum.reduce(
                [np.abs(analytic), np.abs(numeric), np.full_like(numeric, 1e-8)]
            )
            assert err.max() < 1e-4

    def test_cs_grad_reps_matches_fd(self, rng):
        for trial in range(10):
            reps = rng.normal(size=(7, 5))
            labels = np.array([0, 0, 0, 1, 1, 0, 1.0])
            b = batch([0.5] * 7, labels, reps=reps)
            analytic = cs_grad_reps(b)
            numeric = _fd(
                lambda r: cs_loss(batch([0.5] * 7, labels, reps=r.reshape(7, 5))),
                reps.copy().ravel(),
            ).reshape(7, 5)
            err = np.abs(analytic - numeric) / np.maximum.reduce(
                [np.abs(analytic), np.abs(numeric), np.full_like(numeric, 1e-8)]
            )
            assert err.max() < 1e-4

    def test_focal_grad_matches_fd(self, rng):
        for gamma in (0.0, 1.0, 2.0):
            probs = rng.uniform(0.05, 0.95, size=6)
            labels = (rng.random(6) < 0.5).astype(float)
            b = batch(probs, labels)
            analytic = focal_grad_probs(b, gamma=gamma, alpha_f=0.25)
            numeric = _fd(
                lambda p: focal_loss(batch(p, labels), gamma=gamma, alpha_f=0.25), b.probs.copy()
            )
            err = np.abs(analytic - numeric) / np.maximum.reduce(
                [np.abs(analytic), np.abs(numeric), np.full_like(numeric, 1e-8)]
            )
            assert err.max() < 1e-4


def test_bce_is_finite_after_clamping():
    b = batch([0.0, 1.0], [1, 0])
    vals = bce_elementwise(b.probs, b.labels)
    assert np.all(np.isfinite(vals))
