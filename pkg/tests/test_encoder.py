"""Encoder forward-pass tests: dense math, mask semantics, trace contracts."""

import numpy as np
import pytest

from cpvit.encoder import (
    ConfigurationError,
    EncoderConfig,
    EncoderWeights,
    LayerWeights,
    forward,
    random_weights,
    record_attention,
)
from cpvit.masks import CascadeMask, MaskError
from cpvit.tensor import DimensionError


def small_config(**overrides):
    defaults = dict(
        num_layers=2, num_heads=2, seq_len=6, head_dim=3, ffn_hidden=10
    )
    defaults.update(overrides)
    return EncoderConfig(**defaults)


def mask_for(cfg, dead_patches=(), dead_heads=(), layer_index=-1):
    patch = np.ones(cfg.seq_len, dtype=np.uint8)
    head = np.ones(cfg.num_heads, dtype=np.uint8)
    patch[list(dead_patches)] = 0
    head[list(dead_heads)] = 0
    return CascadeMask(patch_mask=patch, head_mask=head, layer_index=layer_index)


class TestDenseForward:
    def test_all_ones_masks_match_maskless(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(6, 6))
        out_plain, _ = forward(w, x)
        masks = [mask_for(cfg, layer_index=i) for i in range(cfg.num_layers)]
        out_masked, _ = forward(w, x, masks=masks)
        assert np.allclose(out_plain, out_masked, atol=1e-12, rtol=0)

    def test_hand_worked_single_layer(self):
        # H=1, L=2, E=D=2, zero Q/K makes attention uniform; identity V and
        # output projections; zero FFN. Expected output worked by hand:
        #   LN([1,3]) = LN([5,7]) = [-1, 1] (eps 0)   V = LN(x)
        #   P = [[.5,.5],[.5,.5]]  ->  AV rows = mean of V rows = [-1, 1]
        #   x + AV = [[0,4],[4,8]], FFN contributes 0
        cfg = EncoderConfig(
            num_layers=1, num_heads=1, seq_len=2, head_dim=2, ffn_hidden=2,
            ln_eps=0.0,
        )
        e = 2
        lw = LayerWeights(
            w_q=np.zeros((e, e)), w_k=np.zeros((e, e)),
            w_v=np.eye(e), w_o=np.eye(e),
            b_q=np.zeros(e), b_k=np.zeros(e), b_v=np.zeros(e), b_o=np.zeros(e),
            w_ffn1=np.zeros((e, e)), b_ffn1=np.zeros(e),
            w_ffn2=np.zeros((e, e)), b_ffn2=np.zeros(e),
            ln1_gamma=np.ones(e), ln1_beta=np.zeros(e),
            ln2_gamma=np.ones(e), ln2_beta=np.zeros(e),
        )
        w = EncoderWeights(config=cfg, layers=(lw,))
        x = np.array([[1.0, 3.0], [5.0, 7.0]])
        out, trace = forward(w, x)
        assert np.allclose(out, [[0.0, 4.0], [4.0, 8.0]], atol=1e-12, rtol=0)
        assert np.allclose(
            trace.layers[0].attention_probability, 0.5, atol=1e-12, rtol=0
        )

    def test_classifier_readout_shape(self):
        cfg = small_config(num_classes=7)
        w = random_weights(cfg, np.random.default_rng(4))
        x = np.random.default_rng(5).normal(size=(6, 6))
        logits, trace = forward(w, x)
        assert logits.shape == (7,)
        assert trace.final_features.shape == (6, 6)
        assert np.array_equal(trace.logits, logits)

    def test_attention_rows_sum_to_one(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(8))
        x = np.random.default_rng(9).normal(size=(6, 6))
        _, trace = forward(w, x)
        for layer in trace.layers:
            sums = layer.attention_probability.sum(axis=-1)
            assert np.allclose(sums, 1.0, atol=1e-9)

    def test_input_shape_mismatch(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            forward(w, np.zeros((5, 6)))


class TestRecordAttention:
    def test_layer_count_and_row_sums(self):
        cfg = small_config(num_layers=3)
        w = random_weights(cfg, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(6, 6))
        records = record_attention(w, x)
        assert len(records) == 3
        for rec in records:
            assert rec.shape == (2, 6, 6)
            assert np.allclose(rec.sum(axis=-1), 1.0, atol=1e-9)

    def test_bit_for_bit_matches_forward_trace(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(6, 6))
        records = record_attention(w, x)
        _, trace = forward(w, x)
        for rec, layer in zip(records, trace.layers):
            assert np.array_equal(rec, layer.attention_probability)


class TestMaskSemantics:
    def test_cascade_zeroing_of_pruned_patch(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(6))
        x = np.random.default_rng(7).normal(size=(6, 6))
        masks = [mask_for(cfg, layer_index=0), mask_for(cfg, dead_patches=[3], layer_index=1)]
        _, trace = forward(w, x, masks=masks)
        layer2 = trace.layers[1]
        assert (layer2.attention_probability[:, 3, :] == 0.0).all()
        assert (layer2.attention_probability[:, :, 3] == 0.0).all()
        assert (layer2.attention_scores[:, 3, :] == 0.0).all()
        assert (layer2.attention_scores[:, :, 3] == 0.0).all()
        assert (layer2.layer_output[3] == 0.0).all()

    def test_surviving_rows_renormalize(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(6))
        x = np.random.default_rng(7).normal(size=(6, 6))
        masks = [mask_for(cfg, dead_patches=[2, 4], layer_index=i) for i in range(2)]
        _, trace = forward(w, x, masks=masks)
        for layer in trace.layers:
            probs = layer.attention_probability
            alive = [0, 1, 3, 5]
            assert np.allclose(probs[:, alive, :].sum(axis=-1), 1.0, atol=1e-9)

    def test_head_zeroing_and_contribution(self):
        cfg = small_config()
        rng = np.random.default_rng(10)
        w = random_weights(cfg, rng)
        x = np.random.default_rng(11).normal(size=(6, 6))
        masks = [mask_for(cfg, dead_heads=[1], layer_index=i) for i in range(2)]
        out, trace = forward(w, x, masks=masks)
        for layer in trace.layers:
            assert (layer.attention_probability[1] == 0.0).all()
        # a pruned head's V/Q/K weights cannot influence the output
        d = cfg.head_dim
        tampered_layers = []
        for lw in w.layers:
            w_v = lw.w_v.copy()
            w_v[:, d:] += 123.0
            tampered_layers.append(
                LayerWeights(**{**lw.__dict__, "w_v": w_v})
            )
        w2 = EncoderWeights(config=cfg, layers=tuple(tampered_layers))
        out2, _ = forward(w2, x, masks=masks)
        assert np.allclose(out, out2, atol=1e-12, rtol=0)

    def test_residual_stream_of_pruned_patch_is_zero(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(12))
        x = np.random.default_rng(13).normal(size=(6, 6))
        masks = [mask_for(cfg, layer_index=0), mask_for(cfg, dead_patches=[5], layer_index=1)]
        _, trace = forward(w, x, masks=masks)
        assert (trace.layers[1].layer_output[5] == 0.0).all()

    def test_monotonicity_enforced(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(0))
        x = np.zeros((6, 6))
        masks = [mask_for(cfg, dead_patches=[2], layer_index=0), mask_for(cfg, layer_index=1)]
        with pytest.raises(ConfigurationError, match="resurrect"):
            forward(w, x, masks=masks)

    def test_wrong_mask_count(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            forward(w, np.zeros((6, 6)), masks=[mask_for(cfg)])

    def test_zero_survivor_masks_rejected_at_construction(self):
        with pytest.raises(MaskError):
            CascadeMask(patch_mask=np.zeros(4, dtype=np.uint8), head_mask=np.ones(2, dtype=np.uint8))
        with pytest.raises(MaskError):
            CascadeMask(patch_mask=np.ones(4, dtype=np.uint8), head_mask=np.zeros(2, dtype=np.uint8))
        patch = np.ones(4, dtype=np.uint8)
        patch[0] = 0
        with pytest.raises(MaskError):
            CascadeMask(patch_mask=patch, head_mask=np.ones(2, dtype=np.uint8))


class TestHeadPermutation:
    def test_permuting_heads_permutes_trace_and_preserves_output(self):
        cfg = EncoderConfig(num_layers=1, num_heads=3, seq_len=5, head_dim=2, ffn_hidden=8)
        rng = np.random.default_rng(21)
        w = random_weights(cfg, rng)
        x = np.random.default_rng(22).normal(size=(5, 6))
        perm = [2, 0, 1]
        d = cfg.head_dim

        def permute_cols(m):
            blocks = [m[:, p * d : (p + 1) * d] for p in perm]
            return np.concatenate(blocks, axis=1)

        def permute_rows(m):
            blocks = [m[p * d : (p + 1) * d, :] for p in perm]
            return np.concatenate(blocks, axis=0)

        lw = w.layers[0]
        permuted = LayerWeights(
            **{
                **lw.__dict__,
                "w_q": permute_cols(lw.w_q),
                "w_k": permute_cols(lw.w_k),
                "w_v": permute_cols(lw.w_v),
                "w_o": permute_rows(lw.w_o),
            }
        )
        w2 = EncoderWeights(config=cfg, layers=(permuted,))
        out1, trace1 = forward(w, x)
        out2, trace2 = forward(w2, x)
        assert np.allclose(out1, out2, atol=1e-12, rtol=0)
        for h, p in enumerate(perm):
            assert np.allclose(
                trace2.layers[0].attention_probability[h],
                trace1.layers[0].attention_probability[p],
                atol=1e-12, rtol=0,
            )


class TestConfigValidation:
    def test_rejects_bad_dimensions(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(num_layers=0, num_heads=1, seq_len=4, head_dim=2, ffn_hidden=4)
        with pytest.raises(ConfigurationError):
            EncoderConfig(num_layers=1, num_heads=1, seq_len=1, head_dim=2, ffn_hidden=4)
        with pytest.raises(ConfigurationError):
            EncoderConfig(num_layers=1, num_heads=1, seq_len=4, head_dim=2, ffn_hidden=4, gelu="bogus")

    def test_rejects_wrong_weight_shapes(self):
        cfg = small_config()
        w = random_weights(cfg, np.random.default_rng(0))
        bad = LayerWeights(**{**w.layers[0].__dict__, "w_q": np.zeros((3, 3))})
        with pytest.raises(ConfigurationError, match="w_q"):
            EncoderWeights(config=cfg, layers=(bad,) + w.layers[1:])
