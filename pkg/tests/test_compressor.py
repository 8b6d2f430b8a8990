import numpy as np
import pytest

from evocomp.core import DataError, Sample
from evocomp.compressor import (
    CompressorConfig,
    adapt_dim,
    forward,
    grad_check,
    init_params,
    load_params,
    ratio_to_r,
    save_params,
    select_top_r,
)
from evocomp.compressor.model import BLOCK_PARAM_NAMES, forward_tokens
from evocomp.losses import GhmConfig

CFG = CompressorConfig(d_model=8, heads=2, ghm=GhmConfig(bins=10))


def sample_of(rng, n=4, m=2, d=8, sid="x"):
    return Sample(id=sid, visual=rng.normal(size=(n, d)), text=rng.normal(size=(m, d)))


def zeroed_block(params):
    z = params.copy()
    for name in BLOCK_PARAM_NAMES:
        getattr(z, name)[...] = 0.0
    return z


class TestInitParams:
    def test_seed_determinism(self):
        a = init_params(CFG, rng=np.random.default_rng(3))
        b = init_params(CFG, rng=np.random.default_rng(3))
        for name, arr in a.as_dict().items():
            assert np.array_equal(arr, b.as_dict()[name])

    def test_donor_copied_except_classifier(self, rng):
        donor = init_params(CFG, rng=np.random.default_rng(1))
        fresh = init_params(CFG, donor=donor, rng=np.random.default_rng(2))
        for name in BLOCK_PARAM_NAMES:
            assert np.array_equal(getattr(fresh, name), getattr(donor, name))
        assert not np.array_equal(fresh.cls_w, donor.cls_w)

    def test_donor_file_roundtrip(self, tmp_path):
        donor = init_params(CFG, rng=np.random.default_rng(1))
        path = tmp_path / "donor.evp"
        save_params(path, donor, CFG)
        fresh = init_params(CFG, donor=path, rng=np.random.default_rng(2))
        donor32 = donor.wq.astype(np.float32).astype(np.float64)
        assert np.array_equal(fresh.wq, donor32)

    def test_donor_shape_mismatch(self, tmp_path):
        donor = init_params(CFG, rng=np.random.default_rng(1))
        path = tmp_path / "donor.evp"
        save_params(path, donor, CFG)
        wide = CompressorConfig(d_model=16, heads=2, ghm=GhmConfig(bins=10))
        with pytest.raises(DataError, match="donor"):
            init_params(wide, donor=path)


class TestForward:
    def test_shapes(self, rng):
        s = sample_of(rng, n=5, m=3)
        out = forward(s, init_params(CFG, rng=rng), CFG)
        assert out.probs.shape == (5,)
        assert out.visual_reps.shape == (5, 8)
        assert out.text_reps.shape == (3, 8)
        assert np.all((out.probs > 0) & (out.probs < 1))

    def test_zero_weights_identity_bit_exact(self, rng):
        s = sample_of(rng)
        z = zeroed_block(init_params(CFG, rng=rng))
        out = forward(s, z, CFG)
        assert np.array_equal(out.visual_reps, s.visual)
        assert np.array_equal(out.text_reps, s.text)

    def test_zero_weights_probs_from_raw_inputs(self, rng):
        s = sample_of(rng)
        z = zeroed_block(init_params(CFG, rng=rng))
        out = forward(s, z, CFG)
        logits = s.visual @ z.cls_w + z.cls_b[0]
        assert np.allclose(out.probs, 1 / (1 + np.exp(-logits)), rtol=0, atol=0)

    def test_permutation_equivariance(self, rng):
        params = init_params(CFG, rng=rng)
        s = sample_of(rng, n=6, m=3)
        base = forward(s, params, CFG)
        perm = np.random.default_rng(5).permutation(6)
        permuted = Sample(id="p", visual=s.visual[perm], text=s.text)
        out = forward(permuted, params, CFG)
        assert np.max(np.abs(out.probs - base.probs[perm])) < 1e-10
        assert np.max(np.abs(out.visual_reps - base.visual_reps[perm])) < 1e-10

    def test_text_permutation_leaves_probs(self, rng):
        params = init_params(CFG, rng=rng)
        s = sample_of(rng, n=4, m=4)
        base = forward(s, params, CFG)
        perm = np.random.default_rng(6).permutation(4)
        out = forward(Sample(id="p", visual=s.visual, text=s.text[perm]), params, CFG)
        assert np.max(np.abs(out.probs - base.probs)) < 1e-10

    def test_positions_break_equivariance(self, rng):
        cfg = CompressorConfig(d_model=8, heads=2, use_positions=True, ghm=GhmConfig(bins=10))
        params = init_params(cfg, rng=rng)
        s = sample_of(rng, n=6, m=0)
        base = forward(s, params, cfg)
        perm = np.array([1, 0, 2, 3, 4, 5])
        out = forward(Sample(id="p", visual=s.visual[perm], text=s.text), params, cfg)
        assert not np.allclose(out.probs, base.probs[perm], rtol=0, atol=1e-12)

    def test_no_visual_tokens_rejected(self, rng):
        params = init_params(CFG, rng=rng)
        with pytest.raises(DataError):
            forward_tokens(np.zeros((0, 8)), np.zeros((0, 8)), params, CFG)

    def test_width_mismatch_adapts(self, rng):
        params = init_params(CFG, rng=rng)
        s = sample_of(rng, n=3, m=1, d=16)
        out = forward(s, params, CFG)
        assert out.probs.shape == (3,)


class TestAdaptDim:
    def test_even_windows(self):
        got = adapt_dim(np.array([[1.0, 2.0, 3.0, 4.0]]), 2)
        assert got.tolist() == [[1.5, 3.5]]

    def test_identity(self, rng):
        rows = rng.normal(size=(3, 5))
        assert np.array_equal(adapt_dim(rows, 5), rows)

    def test_overlapping_windows(self):
        got = adapt_dim(np.array([[1.0, 2.0, 3.0]]), 2)
        assert got.tolist() == [[1.5, 2.5]]

    def test_upsample(self):
        got = adapt_dim(np.array([[1.0, 3.0]]), 4)
        assert got.tolist() == [[1.0, 1.0, 3.0, 3.0]]


class TestSelectTopR:
    def test_tie_breaks_low_index(self):
        mask = select_top_r(np.array([0.9, 0.1, 0.5, 0.5]), 2)
        assert mask.bits == (1, 0, 1, 0)

    def test_full_and_empty(self):
        probs = np.array([0.2, 0.8, 0.5])
        assert select_top_r(probs, 3).bits == (1, 1, 1)
        assert select_top_r(probs, 0).bits == (0, 0, 0)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            select_top_r(np.array([0.5]), 2)

    def test_count_always_r(self, rng):
        for _ in range(25):
            probs = rng.random(10)
            r = int(rng.integers(0, 11))
            assert select_top_r(probs, r).retained == r

    def test_ratio_rounding(self):
        assert ratio_to_r(1 / 3, 24) == 8
        assert ratio_to_r(0.5, 5) == 3  # half away from zero
        assert ratio_to_r(0.0, 5) == 0
        assert ratio_to_r(1.0, 5) == 5


class TestGradCheck:
    def test_small_config_under_tolerance(self, rng):
        params = init_params(CFG, rng=np.random.default_rng(8))
        s = sample_of(np.random.default_rng(9))
        err = grad_check(params, s, [1, 0, 0, 1], CFG, rng=np.random.default_rng(10))
        assert err < 1e-4

    def test_classifier_bias_closed_form(self):
        # zero block, zero classifier: p = 0.5 everywhere, alpha = 0, labels 0
        cfg = CompressorConfig(d_model=8, heads=2, alpha=0.0, ghm=GhmConfig(bins=10))
        params = zeroed_block(init_params(cfg, rng=np.random.default_rng(0)))
        params.cls_w[...] = 0.0
        params.cls_b[...] = 0.0
        rng = np.random.default_rng(1)
        s = sample_of(rng)
        from evocomp.compressor.model import training_grads

        labels = np.zeros(4)
        _, grads = training_grads(s.visual, s.text, labels, params, cfg)
        # d/db of mean beta*bce at p=0.5, y=0 is mean(beta * 0.5); all tokens share
        # one region so beta = 1/bins
        assert grads["cls_b"][0] == pytest.approx(0.5 / 10, rel=1e-12)
        assert grads["cls_b"][0] > 0

    def test_corrupted_gradient_detected(self, rng):
        params = init_params(CFG, rng=np.random.default_rng(8))
        s = sample_of(np.random.default_rng(9))

        def corrupt(grads):
            grads["wq"] *= 1.5

        err = grad_check(params, s, [1, 0, 0, 1], CFG, rng=np.random.default_rng(10), corrupt=corrupt)
        assert err > 1e-2


class TestParamsFile:
    def test_roundtrip_bytes(self, tmp_path):
        params = init_params(CFG, rng=np.random.default_rng(3))
        path = tmp_path / "p.evp"
        save_params(path, params, CFG, extra={"loss": "ghm+cs"})
        again, header = load_params(path)
        assert header["loss"] == "ghm+cs"
        assert header["d_model"] == 8
        save_params(tmp_path / "q.evp", again, CompressorConfig.from_header(header), extra={"loss": "ghm+cs"})
        # identical after a float32 roundtrip
        assert (tmp_path / "q.evp").read_bytes() == path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.evp"
        path.write_bytes(b"WRNG" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            load_params(path)
