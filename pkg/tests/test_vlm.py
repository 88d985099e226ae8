"""Toy vision-language model: attention math, forward contracts, record invariants."""

import math
import os

import numpy as np
import pytest

from lavender.tensor import ShapeError, Tensor, grad_check
from lavender.vlm import (AttentionRecord, SamplePair, ToyVLM, VlmConfig, Vocab, accuracy, greedy_decode,
                          scaled_dot_attention, vlm_nll)

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def sample(rng, n_patches=4, q=(1, 2, 3), label=(4, 5), sid="s"):
    words = [f"w{i}" for i in range(len(q) + len(label))]
    return SamplePair(sid, rng.random((n_patches, 3)), list(q), list(label), words)


class TestScaledDotAttention:
    def test_identity_inputs(self):
        eye = np.eye(2)
        out, w = scaled_dot_attention(eye, eye, eye)
        e = math.exp(1 / math.sqrt(2))
        np.testing.assert_allclose(w.data, [[e / (e + 1), 1 / (e + 1)], [1 / (e + 1), e / (e + 1)]], atol=1e-15)
        np.testing.assert_allclose(w.data.sum(-1), 1.0)

    def test_zero_query_is_uniform(self, rng):
        _, w = scaled_dot_attention(np.zeros((3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2)))
        np.testing.assert_allclose(w.data, 0.2, atol=1e-15)

    def test_golden_pair(self):
        # softmax([1/sqrt 2, 0]) at 64-bit
        _, w = scaled_dot_attention(np.array([[1.0, 0.0]]), np.eye(2), np.eye(2))
        np.testing.assert_allclose(w.data, [[0.6698, 0.3302]], atol=5e-5)

    def test_key_dim_mismatch(self):
        with pytest.raises(ShapeError):
            scaled_dot_attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))

    def test_weights_recorded(self, rng):
        rec = []
        _, w = scaled_dot_attention(rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3)),
                                    record=rec)
        assert rec == [w]


class TestForward:
    def test_logit_shape(self, rng):
        cfg = VlmConfig(d_model=8, n_heads=1, n_layers=1, cross_layer_indices=(0,), vocab_size=8,
                        patch_grid=(2, 2), dtype="float64")
        logits, _ = ToyVLM.init(cfg, 0).forward(sample(rng))
        assert logits.shape == (1, 2, 8)  # one batch row, one logit row per label token

    def test_zero_head_gives_uniform_nll(self, rng):
        cfg = VlmConfig(d_model=8, n_heads=1, n_layers=1, cross_layer_indices=(0,), vocab_size=8,
                        patch_grid=(2, 2), zero_head=True, dtype="float64")
        s = sample(rng)
        logits, _ = ToyVLM.init(cfg, 0).forward(s)
        assert vlm_nll(logits, [s.label]).item() == pytest.approx(2 * math.log(8), rel=1e-12)

    def test_golden_logits(self):
        cfg = VlmConfig(d_model=16, n_heads=2, n_layers=2, cross_layer_indices=(1,), vocab_size=12,
                        patch_grid=(2, 2), dtype="float64")
        rng = np.random.default_rng(5)
        s = SamplePair("g", rng.random((4, 3)), [1, 2, 3], [4, 5], ["a", "b", "c", "d", "e"])
        logits, _ = ToyVLM.init(cfg, 2024).forward([s])
        np.testing.assert_allclose(logits.data, np.load(os.path.join(GOLDEN, "vlm_cross_logits.npy")),
                                   rtol=0, atol=1e-12)

    def test_overlong_text(self, rng):
        cfg = VlmConfig(vocab_size=8, patch_grid=(2, 2), max_text_len=3)
        with pytest.raises(ValueError, match="max_text_len"):
            ToyVLM.init(cfg, 0).forward(sample(rng))

    def test_token_out_of_vocab(self, rng):
        cfg = VlmConfig(vocab_size=4, patch_grid=(2, 2))
        with pytest.raises(ValueError, match="vocab_size"):
            ToyVLM.init(cfg, 0).forward(sample(rng))

    def test_cross_only_in_cross_layers(self):
        model = ToyVLM.init(VlmConfig(cross_layer_indices=(1, 3)), 0)
        assert {n.split(".")[1] for n in model.params if ".cross." in n} == {"1", "3"}

    @pytest.mark.parametrize("variant", ["cross", "self"])
    def test_patch_permutation_equivariance(self, variant, rng):
        cfg = VlmConfig(variant=variant, d_model=16, n_heads=2, n_layers=2, cross_layer_indices=(0, 1),
                        vocab_size=10, patch_grid=(3, 3), dtype="float64")
        model = ToyVLM.init(cfg, 1)
        s = sample(rng, n_patches=9)
        base, _ = model.forward(s)
        perm = rng.permutation(9)
        model.params["patch_pos"].data = model.params["patch_pos"].data[perm]
        s2 = SamplePair("p", s.patches[perm], s.question, s.label, s.text)
        moved, _ = model.forward(s2)
        np.testing.assert_allclose(moved.data, base.data, atol=1e-9)

    def test_batch_matches_single(self, rng):
        cfg = VlmConfig(d_model=8, n_heads=2, n_layers=2, cross_layer_indices=(1,), vocab_size=8, patch_grid=(2, 2),
                        dtype="float64")
        model = ToyVLM.init(cfg, 0)
        a, b = sample(rng, sid="a"), sample(rng, sid="b")
        both, _ = model.forward([a, b])
        np.testing.assert_allclose(both.data[1], model.forward(b)[0].data[0], atol=1e-12)

    def test_mixed_lengths_rejected(self, rng):
        model = ToyVLM.init(VlmConfig(vocab_size=8, patch_grid=(2, 2)), 0)
        with pytest.raises(ValueError, match="mixes"):
            model.forward([sample(rng), sample(rng, q=(1, 2))])


class TestRecord:
    def test_cross_rows_sum_to_one(self, rng):
        cfg = VlmConfig(vocab_size=8, patch_grid=(2, 2), dtype="float64")
        _, rec = ToyVLM.init(cfg, 0).forward([sample(rng), sample(rng)])
        w = rec.weights
        assert w.shape == (2, 2, 4, 4, 4)  # batch, layers, heads, text, patches
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
        assert rec.layer_ids == [1, 3]

    def test_self_variant_causal_and_unnormalized(self, rng):
        cfg = VlmConfig(variant="self", d_model=8, n_heads=2, n_layers=2, vocab_size=8, patch_grid=(2, 2),
                        dtype="float64")
        _, rec = ToyVLM.init(cfg, 0).forward(sample(rng))
        n_p = 4
        for full in rec.full:
            txt = full.data[0, :, n_p:, n_p:]
            assert (txt[:, np.triu_indices(txt.shape[-1], 1)[0], np.triu_indices(txt.shape[-1], 1)[1]] == 0).all()
            np.testing.assert_allclose(full.data.sum(-1), 1.0, atol=1e-12)
        sub = rec.weights
        assert (sub >= 0).all()
        assert (sub.sum(-1) < 1.0 - 1e-6).all()

    def test_from_array_and_subset(self, rng):
        arr = rng.random((3, 2, 4, 5))
        rec = AttentionRecord.from_array(arr, layer_ids=[0, 2, 5])
        np.testing.assert_array_equal(rec.weights, arr)
        np.testing.assert_array_equal(rec.subset([5]).weights, arr[2:])
        with pytest.raises(ValueError):
            rec.subset([1])


class TestLoss:
    def test_uniform_logits(self):
        assert vlm_nll(Tensor(np.zeros((3, 5))), [0, 1, 2]).item() == pytest.approx(3 * math.log(5))

    def test_confident_limit(self):
        assert vlm_nll(Tensor(np.array([[60.0, 0.0, 0.0]])), [0]).item() < 1e-20

    def test_golden(self):
        # -log softmax([2, 0, 0])_0 at 64-bit
        assert vlm_nll(Tensor(np.array([[2.0, 0.0, 0.0]])), [0]).item() == pytest.approx(0.2395, abs=5e-5)

    def test_batch_mean(self):
        logits = Tensor(np.zeros((2, 3, 4)))
        assert vlm_nll(logits, np.zeros((2, 3), dtype=int)).item() == pytest.approx(3 * math.log(4))

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            vlm_nll(Tensor(np.zeros((1, 3))), [3])

    def test_gradient(self, rng):
        labels = rng.integers(0, 6, size=(2, 3))
        assert grad_check(lambda x: vlm_nll(x, labels), rng.normal(size=(2, 3, 6))) < 1e-4


class TestVocabAndDecode:
    def test_vocab_roundtrip(self):
        v = Vocab(["<pad>", "Red", "blue"])
        assert v.encode(["RED", "blue"]) == [1, 2]
        assert v.decode([2, 1]) == ["blue", "red"]
        with pytest.raises(KeyError):
            v.encode(["green"])
        with pytest.raises(ValueError):
            Vocab(["a", "A"])

    def test_greedy_decode_matches_argmax(self, rng):
        cfg = VlmConfig(d_model=8, n_heads=2, n_layers=2, cross_layer_indices=(1,), vocab_size=8, patch_grid=(2, 2),
                        dtype="float64")
        model = ToyVLM.init(cfg, 0)
        s = sample(rng, label=(4,))
        logits, _ = model.forward(s)
        assert greedy_decode(model, [s])[0, 0] == logits.data[0, 0].argmax()
        assert accuracy(model, [s]) == float(logits.data[0, 0].argmax() == 4)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(d_model=10, n_heads=4), dict(cross_layer_indices=(4,)),
                                    dict(variant="both"), dict(patch_grid=(0, 2))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            VlmConfig(**kw)

    def test_self_variant_parallel_layers(self):
        assert VlmConfig(variant="self", n_layers=4).parallel_layers == (0, 1, 2, 3)
        assert VlmConfig(variant="self", n_layers=10).parallel_layers == (1, 3, 5, 7, 9)
        assert VlmConfig(cross_layer_indices=(3, 1)).parallel_layers == (1, 3)
