import math

import numpy as np
import pytest

from uatr.dsp import FeatureSequence, MelConfig
from uatr.errors import (
    CheckpointError,
    ConfigError,
    EmptyEvaluationError,
    ShapeError,
    StaleTapeError,
)
from uatr.ingest import CategoryMap
from uatr.nn import (
    EncoderConfig,
    ParamStore,
    batch_forward,
    classify,
    dropout,
    init_params,
    layer_norm,
    mean_pool,
    model_backward,
    model_forward,
    multi_head_attention,
    sinusoidal_positions,
    softmax,
)

TINY = EncoderConfig(input_dim=12, model_dim=16, layers=2, heads=2,
                     ffn_dim=32, dropout_rate=0.0, num_categories=4)


def feat(rng, t=8, d=12):
    return FeatureSequence(rng.standard_normal((t, d)).astype(np.float32), 10.0)


class TestInit:
    def test_same_seed_identical(self):
        a = init_params(TINY, 7)
        b = init_params(TINY, 7)
        assert a.names() == b.names()
        for name in a.names():
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seed_differs(self):
        a, b = init_params(TINY, 1), init_params(TINY, 2)
        assert any(not np.array_equal(a[n], b[n]) for n in a.names())

    def test_norm_gains_are_ones(self):
        params = init_params(TINY, 0)
        np.testing.assert_array_equal(params["layer0.norm1.gain"], np.ones(16))
        np.testing.assert_array_equal(params["final_norm.gain"], np.ones(16))

    def test_biases_and_head_weight_are_zero(self):
        params = init_params(TINY, 0)
        np.testing.assert_array_equal(params["head.bias"], np.zeros(4))
        np.testing.assert_array_equal(params["head.weight"], np.zeros((4, 16)))
        np.testing.assert_array_equal(params["input_proj.bias"], np.zeros(16))

    def test_glorot_limits(self):
        params = init_params(TINY, 0)
        w = params["layer0.ffn.w1.weight"]  # (32, 16)
        limit = math.sqrt(6.0 / (32 + 16))
        assert np.max(np.abs(w)) <= limit
        assert np.max(np.abs(w)) > 0.5 * limit

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(input_dim=8, model_dim=10, heads=4)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25))

    def test_closed_form(self):
        out = softmax(np.array([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-9)

    def test_shift_invariance_bitwise(self):
        # exactly representable values keep x + c exact, so the subtraction
        # cancels the shift bit for bit
        x = np.array([0.25, -1.5, 0.75, 2.0])
        np.testing.assert_array_equal(softmax(x), softmax(x + 2.0))

    def test_sums_to_one(self, rng):
        out = softmax(rng.standard_normal((5, 9)))
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out > 0)


class TestLayerNorm:
    def test_constant_vector_goes_to_zero(self):
        y, _ = layer_norm(np.full(8, 3.0), np.ones(8), np.zeros(8))
        np.testing.assert_allclose(y, 0.0, atol=1e-4)

    def test_standardizes(self, rng):
        x = rng.standard_normal(64)
        y, _ = layer_norm(x, np.ones(64), np.zeros(64))
        assert abs(y.mean()) < 1e-6
        assert abs(y.var() - 1.0) < 1e-3

    def test_scale_invariance(self, rng):
        x = rng.standard_normal(32)
        y1, _ = layer_norm(x, np.ones(32), np.zeros(32))
        y2, _ = layer_norm(5.0 * x, np.ones(32), np.zeros(32))
        np.testing.assert_allclose(y1, y2, atol=1e-5)


class TestAttention:
    def _params(self, rng, d=16):
        lim = math.sqrt(6.0 / (2 * d))
        return [rng.uniform(-lim, lim, (d, d)) for _ in range(4)]

    def test_single_position_weight_is_one(self, rng):
        wq, wk, wv, wo = self._params(rng)
        x = rng.standard_normal((1, 1, 16))
        y, cache = multi_head_attention(x, wq, wk, wv, wo, heads=2)
        attn = cache[4]
        np.testing.assert_allclose(attn, 1.0)
        np.testing.assert_allclose(y[0, 0], (x[0, 0] @ wv.T) @ wo.T, rtol=1e-5)

    def test_identical_rows_give_identical_outputs(self, rng):
        wq, wk, wv, wo = self._params(rng)
        row = rng.standard_normal(16)
        x = np.broadcast_to(row, (1, 6, 16)).copy()
        y, _ = multi_head_attention(x, wq, wk, wv, wo, heads=2)
        np.testing.assert_allclose(
            y, np.broadcast_to(y[:, :1, :], y.shape), atol=1e-6)

    def test_attention_rows_sum_to_one(self, rng):
        wq, wk, wv, wo = self._params(rng)
        x = rng.standard_normal((2, 7, 16))
        _, cache = multi_head_attention(x, wq, wk, wv, wo, heads=2)
        attn = cache[4]
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


class TestForward:
    def test_zero_layers_is_projection_plus_final_norm(self, rng):
        cfg = EncoderConfig(input_dim=12, model_dim=16, layers=0, heads=2,
                            ffn_dim=32, dropout_rate=0.0, num_categories=4)
        params = init_params(cfg, 0)
        f = feat(rng)
        _, tape = model_forward(f, params, cfg)
        proj = f.frames @ params["input_proj.weight"].T + params["input_proj.bias"]
        proj = proj + sinusoidal_positions(8, 16)
        want, _ = layer_norm(proj, params["final_norm.gain"],
                             params["final_norm.bias"])
        np.testing.assert_allclose(tape.hidden[0], want, atol=1e-6)

    @pytest.mark.parametrize("t", [1, 2, 17, 83])
    def test_probability_simplex_any_length(self, rng, t):
        params = init_params(TINY, 3)
        probs, _ = model_forward(feat(rng, t=t), params, TINY)
        assert probs.shape == (4,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(probs >= 0)

    def test_eval_mode_bitwise_deterministic(self, rng):
        params = init_params(TINY, 3)
        f = feat(rng)
        a, _ = model_forward(f, params, TINY, mode="eval")
        b, _ = model_forward(f, params, TINY, mode="eval")
        np.testing.assert_array_equal(a, b)

    def test_lengths_beyond_max_positions_still_work(self, rng):
        cfg = EncoderConfig(input_dim=12, model_dim=16, layers=1, heads=2,
                            ffn_dim=32, dropout_rate=0.0, max_positions=4,
                            num_categories=4)
        params = init_params(cfg, 0)
        probs, _ = model_forward(feat(rng, t=64), params, cfg)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_wrong_feature_dim_is_shape_error(self, rng):
        params = init_params(TINY, 0)
        with pytest.raises(ShapeError):
            model_forward(feat(rng, d=13), params, TINY)

    def test_same_params_accept_one_and_five_second_lengths(self, rng):
        params = init_params(TINY, 1)
        p17, _ = model_forward(feat(rng, t=17), params, TINY)
        p83, _ = model_forward(feat(rng, t=83), params, TINY)
        assert p17.shape == p83.shape == (4,)


class TestMeanPool:
    def test_single_row_identity(self, rng):
        h = rng.standard_normal((1, 16))
        np.testing.assert_array_equal(mean_pool(h), h[0])

    def test_permutation_invariance(self, rng):
        h = rng.standard_normal((9, 16))
        perm = rng.permutation(9)
        np.testing.assert_allclose(mean_pool(h), mean_pool(h[perm]), atol=1e-7)

    def test_constant_rows(self):
        h = np.tile(np.arange(4.0), (5, 1))
        np.testing.assert_allclose(mean_pool(h), np.arange(4.0))

    def test_empty_sequence_errors(self):
        with pytest.raises(EmptyEvaluationError):
            mean_pool(np.zeros((0, 16)))


class TestClassify:
    def test_zero_weights_uniform(self):
        params = ParamStore({"head.weight": np.zeros((4, 16), dtype=np.float32),
                             "head.bias": np.zeros(4, dtype=np.float32)})
        out = classify(np.ones(16, dtype=np.float32), params)
        np.testing.assert_allclose(out, 0.25)

    def test_bias_closed_form(self):
        params = ParamStore({"head.weight": np.zeros((2, 8), dtype=np.float64),
                             "head.bias": np.array([0.0, math.log(3.0)])})
        out = classify(np.zeros(8), params)
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-9)

    def test_sums_to_one(self, rng):
        params = ParamStore({"head.weight": rng.standard_normal((5, 8)),
                             "head.bias": rng.standard_normal(5)})
        out = classify(rng.standard_normal(8), params)
        assert out.sum() == pytest.approx(1.0, abs=1e-6)


class TestDropout:
    def test_eval_mode_passthrough(self, rng):
        x = rng.standard_normal((4, 5)).astype(np.float32)
        y, mask = dropout(x, 0.3, rng=None)
        assert mask is None
        np.testing.assert_array_equal(y, x)

    def test_fixed_seed_reproducible(self, rng):
        x = rng.standard_normal((6, 7)).astype(np.float32)
        r1 = np.random.default_rng(99)
        r2 = np.random.default_rng(99)
        y1, _ = dropout(x, 0.25, r1)
        y2, _ = dropout(x, 0.25, r2)
        np.testing.assert_array_equal(y1, y2)

    def test_expectation_matches_identity(self, rng):
        # inverted dropout: the mean over many masks approaches the input
        x = np.full((2, 50), 2.0, dtype=np.float64)
        r = np.random.default_rng(0)
        acc = np.zeros_like(x)
        n = 1000
        for _ in range(n):
            y, _ = dropout(x, 0.1, r)
            acc += y
        rel = np.abs(acc / n - x) / np.abs(x)
        assert rel.mean() <= 0.05


class TestBackward:
    def test_dlogits_closed_form(self, rng):
        params = init_params(TINY, 5)
        f = feat(rng)
        probs, tape = model_forward(f, params, TINY, mode="train", seed=0)
        grads = model_backward(tape, 2)
        # head bias gradient is exactly p - onehot(label)
        want = probs.copy()
        want[2] -= 1.0
        np.testing.assert_allclose(grads["head.bias"], want, atol=1e-6)

    def test_mean_pool_gradient_distribution(self, rng):
        params = init_params(TINY, 5)
        f = feat(rng, t=6)
        probs, tape = model_forward(f, params, TINY, mode="train", seed=0)
        grads = model_backward(tape, 1)
        # head weight gradient = outer(dlogits, pooled)
        dlogits = probs.copy()
        dlogits[1] -= 1.0
        np.testing.assert_allclose(
            grads["head.weight"], np.outer(dlogits, tape.pooled[0]), atol=1e-6)

    def test_stale_tape_rejected(self, rng):
        params = init_params(TINY, 5)
        _, tape = model_forward(feat(rng), params, TINY, mode="train", seed=0)
        model_backward(tape, 0)
        with pytest.raises(StaleTapeError):
            model_backward(tape, 0)

    def test_label_out_of_range(self, rng):
        params = init_params(TINY, 5)
        _, tape = model_forward(feat(rng), params, TINY, mode="train", seed=0)
        with pytest.raises(IndexError):
            model_backward(tape, 7)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_finite_difference_agreement(self, seed):
        # float64 run of the dtype-generic code; fp32 FD noise at eps=1e-3
        # would exceed the tolerance for small-gradient parameters
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 8, 12))
        label = rng.integers(0, 4)
        params = init_params(TINY, seed).astype(np.float64)
        _, tape = batch_forward(x, params, TINY, mode="train", seed=seed)
        grads = model_backward(tape, label)

        def loss():
            probs, _ = batch_forward(x, params, TINY, mode="eval")
            return -math.log(max(probs[0, label], 1e-12))

        eps = 1e-3
        worst = 0.0
        for name in params.names():
            flat = params[name].reshape(-1)
            gref = grads[name].reshape(-1)
            idx = rng.choice(flat.size, size=min(8, flat.size), replace=False)
            for i in idx:
                keep = flat[i]
                flat[i] = keep + eps
                lp = loss()
                flat[i] = keep - eps
                lm = loss()
                flat[i] = keep
                fd = (lp - lm) / (2 * eps)
                rel = abs(fd - gref[i]) / max(abs(fd), abs(gref[i]), 1e-6)
                worst = max(worst, rel)
        assert worst <= 1e-3

    def test_dropout_grads_flow_through_masks(self, rng):
        cfg = EncoderConfig(input_dim=12, model_dim=16, layers=1, heads=2,
                            ffn_dim=32, dropout_rate=0.5, num_categories=4)
        params = init_params(cfg, 0)
        _, tape = model_forward(feat(rng), params, cfg, mode="train", seed=11)
        grads = model_backward(tape, 0)
        assert all(np.all(np.isfinite(grads[n])) for n in grads.names())


class TestCheckpoint:
    def _checkpoint(self, seed=0):
        from uatr.checkpoint import Checkpoint
        params = init_params(TINY, seed)
        cmap = CategoryMap.identity(["a", "b", "c", "d"])
        return Checkpoint(params=params, config=TINY, category_map=cmap,
                          mel_config=MelConfig(), sample_rate=16000,
                          metadata={"note": "test"})

    def test_roundtrip_bit_exact(self, tmp_path):
        from uatr.checkpoint import load_checkpoint, save_checkpoint
        ckpt = self._checkpoint()
        path = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.categories == ["a", "b", "c", "d"]
        assert back.config == TINY
        assert back.metadata == {"note": "test"}
        for name in ckpt.params.names():
            np.testing.assert_array_equal(back.params[name], ckpt.params[name])

    def test_save_load_save_byte_identical(self, tmp_path):
        from uatr.checkpoint import load_checkpoint, save_checkpoint
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(self._checkpoint(), p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_tampered_payload_fails_checksum(self, tmp_path):
        from uatr.checkpoint import save_checkpoint, load_checkpoint
        path = tmp_path / "m.ckpt"
        save_checkpoint(self._checkpoint(), path)
        blob = bytearray(path.read_bytes())
        blob[-100] ^= 0xFF  # flip one payload byte
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_category_count_mismatch_rejected(self, tmp_path):
        from uatr.checkpoint import Checkpoint, save_checkpoint, load_checkpoint
        bad = Checkpoint(params=init_params(TINY, 0), config=TINY,
                         category_map=CategoryMap.identity(["a", "b"]),
                         mel_config=MelConfig(), sample_rate=16000)
        path = tmp_path / "bad.ckpt"
        save_checkpoint(bad, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        from uatr.checkpoint import load_checkpoint
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
