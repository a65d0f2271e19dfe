"""Encoder contracts: patch geometry, attention norm bounds, residual
blocks, and gradient correctness."""

import numpy as np
import pytest

from attrvit import tensor as T
from attrvit.encoder import (
    ConfigError,
    EncoderConfig,
    encode,
    encoder_layer,
    init_encoder_params,
    normed_attention,
    patchify,
    softmax_attention,
    tokens_to_grid,
)
from attrvit.tensor import NumericError, ShapeError, Tape, Tensor

TINY = EncoderConfig(image_size=16, patch_size=4, depth=2, heads=2, dim=8)


def tiny_params(seed=0, cfg=TINY):
    return init_encoder_params(cfg, np.random.default_rng(seed))


class TestConfig:
    def test_token_count(self):
        cfg = EncoderConfig(image_size=64, patch_size=8)
        assert cfg.grid == 8 and cfg.tokens == 64

    def test_rejects_indivisible_patch(self):
        with pytest.raises(ConfigError):
            EncoderConfig(image_size=60, patch_size=8)

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigError):
            EncoderConfig(dim=30, heads=4)

    def test_rejects_unknown_attention(self):
        with pytest.raises(ConfigError):
            EncoderConfig(attention="linear")


class TestPatchify:
    def test_shapes(self):
        params = tiny_params()
        tokens = patchify(Tensor(np.zeros((16, 16, 3))), params, TINY)
        assert tokens.shape == (TINY.tokens, TINY.dim)

    def test_batched_shapes(self):
        params = tiny_params()
        tokens = patchify(Tensor(np.zeros((5, 16, 16, 3))), params, TINY)
        assert tokens.shape == (5, TINY.tokens, TINY.dim)

    def test_constant_image_gives_equal_tokens_without_positions(self):
        cfg = EncoderConfig(image_size=16, patch_size=4, depth=2, heads=2, dim=8, positional_embedding=False)
        params = tiny_params(cfg=cfg)
        tokens = patchify(Tensor(np.full((16, 16, 3), 0.37)), params, cfg)
        np.testing.assert_allclose(tokens.data, np.tile(tokens.data[:1], (cfg.tokens, 1)), atol=1e-12)

    def test_patch_content_routing(self):
        # Lighting up exactly one patch must change exactly one token.
        cfg = EncoderConfig(image_size=16, patch_size=4, depth=1, heads=1, dim=8, positional_embedding=False)
        params = tiny_params(cfg=cfg)
        base = np.zeros((16, 16, 3))
        lit = base.copy()
        lit[4:8, 8:12] = 1.0  # patch row 1, col 2 -> token index 1 * 4 + 2
        delta = patchify(Tensor(lit), params, cfg).data - patchify(Tensor(base), params, cfg).data
        changed = np.flatnonzero(np.abs(delta).sum(axis=1) > 1e-12)
        np.testing.assert_array_equal(changed, [6])

    def test_wrong_image_shape(self):
        with pytest.raises(ShapeError):
            patchify(Tensor(np.zeros((8, 16, 3))), tiny_params(), TINY)

    def test_grid_roundtrip(self):
        params = tiny_params()
        tokens = patchify(Tensor(np.random.default_rng(3).uniform(size=(16, 16, 3))), params, TINY)
        grid = tokens_to_grid(tokens, TINY)
        assert grid.shape == (TINY.grid, TINY.grid, TINY.dim)
        np.testing.assert_array_equal(grid.data.reshape(TINY.tokens, TINY.dim), tokens.data)


class TestNormedAttention:
    def test_row_norms_bounded_and_unit(self):
        rng = np.random.default_rng(42)
        cfg = TINY
        for trial in range(100):
            params = tiny_params(seed=trial, cfg=cfg)
            x = Tensor(rng.normal(size=(cfg.tokens, cfg.dim)))
            _, weights = normed_attention(x, params, cfg)
            norms = np.linalg.norm(weights.data, axis=-1)
            assert (norms <= 1.0 + 1e-9).all()
            # Random continuous scores are non-degenerate with probability 1.
            assert (np.abs(norms - 1.0) <= 1e-9).all()

    def test_single_token_weight_is_one(self):
        cfg = EncoderConfig(image_size=4, patch_size=4, depth=1, heads=2, dim=8)
        params = tiny_params(cfg=cfg)
        params["layer0.b_attn"] = Tensor(np.full((2, 1, 1), 5.0))  # positive scalar score
        x = Tensor(np.random.default_rng(0).normal(size=(1, cfg.dim)))
        _, weights = normed_attention(x, params, cfg)
        np.testing.assert_allclose(weights.data, np.ones((2, 1, 1)), atol=1e-12)

    def test_zero_values_give_zero_output(self):
        cfg = TINY
        params = tiny_params(cfg=cfg)
        params["layer0.wv"] = Tensor(np.zeros((cfg.dim, cfg.dim)))
        params["layer0.bo"] = Tensor(np.zeros(cfg.dim))
        x = Tensor(np.random.default_rng(1).normal(size=(cfg.tokens, cfg.dim)))
        out, _ = normed_attention(x, params, cfg)
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_output_energy_bounded_by_values(self):
        # ||A^T V||_F <= sqrt(T) ||V||_F follows from the unit row bound.
        cfg = TINY
        rng = np.random.default_rng(9)
        params = tiny_params(seed=5, cfg=cfg)
        x = Tensor(rng.normal(size=(cfg.tokens, cfg.dim)))
        _, weights = normed_attention(x, params, cfg)
        v = (x.data @ params["layer0.wv"].data).reshape(cfg.tokens, cfg.heads, cfg.head_dim)
        v = np.moveaxis(v, 1, 0)
        for h in range(cfg.heads):
            s_h = weights.data[h].T @ v[h]
            bound = np.sqrt(cfg.tokens) * np.linalg.norm(v[h])
            assert np.linalg.norm(s_h) <= bound + 1e-9

    def test_rejects_nonfinite_input(self):
        x = np.zeros((TINY.tokens, TINY.dim))
        x[0, 0] = np.nan
        with pytest.raises(NumericError):
            normed_attention(Tensor(x), tiny_params(), TINY)


class TestSoftmaxAttention:
    def test_rows_sum_to_one(self):
        cfg = EncoderConfig(image_size=16, patch_size=4, depth=2, heads=2, dim=8, attention="softmax")
        params = tiny_params(cfg=cfg)
        x = Tensor(np.random.default_rng(2).normal(size=(cfg.tokens, cfg.dim)))
        _, weights = softmax_attention(x, params, cfg)
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones((cfg.heads, cfg.tokens)), atol=1e-12)

    def test_same_shapes_as_normed(self):
        params = tiny_params()
        x = Tensor(np.random.default_rng(2).normal(size=(TINY.tokens, TINY.dim)))
        out_a, w_a = normed_attention(x, params, TINY)
        out_b, w_b = softmax_attention(x, params, TINY)
        assert out_a.shape == out_b.shape and w_a.shape == w_b.shape


class TestEncoderLayer:
    def test_zero_weights_preserve_input(self):
        cfg = TINY
        params = tiny_params(cfg=cfg)
        for name in ("wq", "wk", "wv", "wo", "w1", "w2"):
            params[f"layer0.{name}"] = Tensor(np.zeros_like(params[f"layer0.{name}"].data))
        x = Tensor(np.random.default_rng(4).normal(size=(cfg.tokens, cfg.dim)))
        out = encoder_layer(x, params, cfg, 0)
        np.testing.assert_array_equal(out.features.data, x.data)

    def test_shapes(self):
        cfg = TINY
        out = encoder_layer(Tensor(np.zeros((cfg.tokens, cfg.dim))), tiny_params(), cfg, 0)
        assert out.features.shape == (cfg.tokens, cfg.dim)
        assert out.attention.shape == (cfg.heads, cfg.tokens, cfg.tokens)

    def test_gradients_against_finite_differences(self):
        cfg = EncoderConfig(image_size=8, patch_size=4, depth=1, heads=2, dim=6)
        params = tiny_params(cfg=cfg)
        probe = Tensor(np.random.default_rng(8).normal(size=(cfg.tokens, cfg.dim)))

        def f(x):
            return (encoder_layer(x, params, cfg, 0).features * probe).sum()

        x = Tensor(np.random.default_rng(9).normal(size=(cfg.tokens, cfg.dim)))
        assert T.grad_check(f, x) <= 1e-4

    def test_parameter_gradients_against_finite_differences(self):
        cfg = EncoderConfig(image_size=8, patch_size=4, depth=1, heads=2, dim=6)
        params = tiny_params(cfg=cfg)
        x = Tensor(np.random.default_rng(10).normal(size=(cfg.tokens, cfg.dim)))
        for name in ("layer0.wq", "layer0.b_attn", "layer0.w1", "layer0.ln1_g"):
            def f(p, name=name):
                swapped = dict(params)
                swapped[name] = p
                return (encoder_layer(x, swapped, cfg, 0).features ** 2.0).sum()

            assert T.grad_check(f, Tensor(params[name].data.copy()), max_coords=12) <= 1e-4


class TestEncode:
    def test_depth_and_shapes(self):
        params = tiny_params()
        outs = encode(Tensor(np.random.default_rng(0).uniform(size=(16, 16, 3))), params, TINY)
        assert len(outs) == TINY.depth
        for o in outs:
            assert o.features.shape == (TINY.tokens, TINY.dim)
            assert o.attention.shape == (TINY.heads, TINY.tokens, TINY.tokens)

    def test_deterministic(self):
        params = tiny_params()
        img = Tensor(np.random.default_rng(1).uniform(size=(16, 16, 3)))
        a = encode(img, params, TINY)[-1].features.data
        b = encode(img, params, TINY)[-1].features.data
        assert np.array_equal(a, b)

    def test_batch_matches_single(self):
        params = tiny_params()
        rng = np.random.default_rng(5)
        imgs = rng.uniform(size=(3, 16, 16, 3))
        batched = encode(Tensor(imgs), params, TINY)
        for i in range(3):
            single = encode(Tensor(imgs[i]), params, TINY)
            np.testing.assert_allclose(batched[-1].features.data[i], single[-1].features.data, atol=1e-10)
            np.testing.assert_allclose(batched[-1].attention.data[i], single[-1].attention.data, atol=1e-10)

    def test_softmax_variant_runs(self):
        cfg = EncoderConfig(image_size=16, patch_size=4, depth=2, heads=2, dim=8, attention="softmax")
        outs = encode(Tensor(np.zeros((16, 16, 3))), tiny_params(cfg=cfg), cfg)
        assert len(outs) == 2
