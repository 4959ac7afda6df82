"""Deep interaction: relation matrix, two-way max pooling, feature mixing."""

import numpy as np
import pytest

from conftest import tiny_cfg

from stickerrank import autodiff as ad
from stickerrank import data, encoders, interaction
from stickerrank.autodiff import Tensor
from stickerrank.errors import ShapeError
from stickerrank.gradcheck import grad_check
from stickerrank.model import build_params
from stickerrank.params import ParamSet
from stickerrank.tracing import ForwardTrace


@pytest.fixture()
def cfg():
    return tiny_cfg()


@pytest.fixture()
def params(cfg):
    return build_params(cfg, seed=3)


def make_inputs(cfg, params, seed=0, n_words=5):
    rng = np.random.default_rng(seed)
    sticker = encoders.encode_sticker(params, cfg, rng.random((32, 32, 1)))
    utt = encoders.encode_utterance(params, cfg, data.pad_or_truncate(list(rng.integers(2, 40, n_words)), cfg.max_words))
    return sticker, utt


class TestRelationMatrix:
    def test_shape(self, cfg, params):
        sticker, utt = make_inputs(cfg, params)
        units = sticker.o.reshape(4, cfg.d)
        m = interaction.relation_matrix(params, "din", units, utt.hidden, utt.mask)
        assert m.shape == (4, cfg.max_words)

    def test_zero_weight_zero_matrix(self, cfg, params):
        sticker, utt = make_inputs(cfg, params)
        params["din/rel_w"].data[:] = 0.0
        units = sticker.o.reshape(4, cfg.d)
        m = interaction.relation_matrix(params, "din", units, utt.hidden, utt.mask)
        np.testing.assert_array_equal(m.data[:, utt.mask], 0.0)

    def test_matches_elementwise_oracle(self, cfg, params):
        # independent oracle: score each (unit, word) pair one at a time
        sticker, utt = make_inputs(cfg, params, seed=4)
        units = sticker.o.reshape(4, cfg.d)
        m = interaction.relation_matrix(params, "din", units, utt.hidden, utt.mask)
        w = params["din/rel_w"].data
        d = cfg.d
        for k in range(4):
            for j in range(cfg.max_words):
                if not utt.mask[j]:
                    assert m.data[k, j] == np.finfo(np.float64).min
                    continue
                ok = units.data[k]
                hj = utt.hidden.data[j]
                expected = w @ np.concatenate([ok, hj, ok * hj])
                assert m.data[k, j] == pytest.approx(expected, abs=1e-12)

    def test_dim_mismatch(self, cfg, params):
        with pytest.raises(ShapeError):
            interaction.relation_matrix(params, "din", Tensor(np.zeros((4, 5))), Tensor(np.zeros((3, 8))), np.ones(3, bool))


class TestDeepInteract:
    def test_shapes(self, cfg, params):
        sticker, utt = make_inputs(cfg, params)
        res = interaction.deep_interact(params, cfg, sticker, utt)
        assert res.features.shape == (cfg.d,)
        assert res.word_attention.shape == (cfg.max_words,)
        assert res.patch_attention.shape == (4,)

    def test_single_word_column(self, cfg, params):
        sticker, utt = make_inputs(cfg, params, n_words=1)
        units = sticker.o.reshape(4, cfg.d)
        m = interaction.relation_matrix(params, "din", units, utt.hidden, utt.mask)
        res = interaction.deep_interact(params, cfg, sticker, utt)
        np.testing.assert_allclose(res.patch_attention.data, m.data[:, 0], atol=0)

    def test_weighted_sums_match_bruteforce(self, cfg, params):
        sticker, utt = make_inputs(cfg, params, seed=9)
        units = sticker.o.reshape(4, cfg.d).data
        res = interaction.deep_interact(params, cfg, sticker, utt)
        l = np.zeros(cfg.d)
        for j in range(cfg.max_words):
            l += res.word_attention.data[j] * utt.hidden.data[j]
        r = np.zeros(cfg.d)
        for k in range(4):
            r += res.patch_attention.data[k] * units[k]
        expected_l = res.word_attention.data @ utt.hidden.data
        np.testing.assert_allclose(l, expected_l, atol=1e-6)
        # recompute the module's own l/r through its published attentions
        mixed_in = np.concatenate([
            sticker.flat.data, r, sticker.flat.data * r, sticker.flat.data + r])
        q1 = np.maximum(mixed_in @ params["din/mix/w"].data + params["din/mix/b"].data, 0.0)
        q2 = np.maximum(np.concatenate([q1, l]) @ params["din/out/w"].data + params["din/out/b"].data, 0.0)
        np.testing.assert_allclose(res.features.data, q2, atol=1e-6)

    def test_masked_words_zero_attention_and_contribution(self, cfg, params):
        sticker, utt = make_inputs(cfg, params, n_words=3)
        res = interaction.deep_interact(params, cfg, sticker, utt)
        np.testing.assert_array_equal(res.word_attention.data[3:], 0.0)
        # masked rows of hidden are zero, so l only sums real words
        l = res.word_attention.data @ utt.hidden.data
        l_real = res.word_attention.data[:3] @ utt.hidden.data[:3]
        np.testing.assert_array_equal(l, l_real)

    def test_grad_through_interaction(self, cfg):
        params = build_params(cfg, seed=12)
        rng = np.random.default_rng(12)
        image = rng.random((32, 32, 1))
        toks = data.pad_or_truncate(list(rng.integers(2, 40, 4)), cfg.max_words)

        def loss_fn(p):
            sticker = encoders.encode_sticker(p, cfg, image)
            utt = encoders.encode_utterance(p, cfg, toks)
            res = interaction.deep_interact(p, cfg, sticker, utt)
            return ad.tsum(ad.mul(res.features, res.features))

        sub = ParamSet()
        for name in ["din/rel_w", "din/mix/w", "din/mix/b", "din/out/w", "din/out/b", "embed"]:
            sub.add(name, build_params(cfg, seed=12)[name].data)
        full = build_params(cfg, seed=12)

        def loss_with_sub(p):
            merged = full
            for name, t in p.items():
                merged[name].data = t.data
            return loss_fn(merged)

        report = grad_check(loss_with_sub, sub, eps=1e-4, tol=1e-3)
        assert report.passed, report.summary()

    def test_trace_round_trip(self, cfg, params):
        sticker, utt = make_inputs(cfg, params)
        trace = ForwardTrace()
        trace.start_candidate()
        res = interaction.deep_interact(params, cfg, sticker, utt, trace=trace)
        dumped = trace.candidates[-1]
        np.testing.assert_array_equal(dumped["word_attention"][0], res.word_attention.data)
        np.testing.assert_array_equal(dumped["patch_attention"][0], res.patch_attention.data)
