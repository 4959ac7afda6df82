"""Sticker and utterance encoder contracts."""

import numpy as np
import pytest

from conftest import tiny_cfg

from stickerrank import autodiff as ad
from stickerrank import data, encoders
from stickerrank.errors import ConfigError, DataError
from stickerrank.gradcheck import grad_check
from stickerrank.model import StickerRanker, build_params
from stickerrank.params import ParamSet
from stickerrank.tracing import ForwardTrace


@pytest.fixture()
def cfg():
    return tiny_cfg()


@pytest.fixture()
def params(cfg):
    return build_params(cfg, seed=3)


class TestStickerEncoder:
    def test_shapes(self, cfg, params):
        rng = np.random.default_rng(0)
        rep = encoders.encode_sticker(params, cfg, rng.random((32, 32, 1)))
        assert rep.o.shape == (2, 2, 8)
        assert rep.flat.shape == (8,)

    def test_identical_images_identical_reps(self, cfg, params):
        img = np.random.default_rng(1).random((32, 32, 1))
        a = encoders.encode_sticker(params, cfg, img.copy())
        b = encoders.encode_sticker(params, cfg, img.copy())
        assert a.o.data.tobytes() == b.o.data.tobytes()
        assert a.flat.data.tobytes() == b.flat.data.tobytes()

    def test_flat_gradient(self, cfg):
        rng = np.random.default_rng(2)
        params = ParamSet()
        encoders.init_sticker_encoder(params, rng, cfg)
        img = rng.random((32, 32, 1))

        def loss_fn(p):
            rep = encoders.encode_sticker(p, cfg, img)
            return ad.tsum(ad.mul(rep.flat, rep.flat))

        report = grad_check(loss_fn, params, eps=1e-4, tol=1e-3)
        assert report.passed, report.summary()


class TestEmojiHead:
    def test_logit_shape(self, cfg, params):
        rep = encoders.encode_sticker(params, cfg, np.random.default_rng(0).random((32, 32, 1)))
        logits = encoders.classify_emoji(params, cfg, rep.flat)
        assert logits.shape == (3,)

    def test_zero_head_uniform_softmax(self, cfg, params):
        params["emoji/w"].data[:] = 0.0
        params["emoji/b"].data[:] = 0.0
        rep = encoders.encode_sticker(params, cfg, np.random.default_rng(0).random((32, 32, 1)))
        logits = encoders.classify_emoji(params, cfg, rep.flat)
        np.testing.assert_array_equal(logits.data, np.zeros(3))
        probs = ad.masked_softmax(logits, np.ones(3, dtype=bool))
        np.testing.assert_allclose(probs.data, 1 / 3, atol=1e-12)

    def test_missing_config_rejected(self):
        cfg = tiny_cfg(n_emoji=None)
        with pytest.raises(ConfigError):
            encoders.init_emoji_head(ParamSet(), np.random.default_rng(0), cfg)


class TestUtteranceEncoder:
    def utt(self, tokens, max_words=10):
        return data.pad_or_truncate(tokens, max_words)

    def test_hidden_shape(self, cfg, params):
        rep = encoders.encode_utterance(params, cfg, self.utt([2, 3, 4, 5]))
        assert rep.hidden.shape == (10, 8)

    def test_masked_rows_zero(self, cfg, params):
        rep = encoders.encode_utterance(params, cfg, self.utt([2, 3, 4]))
        np.testing.assert_array_equal(rep.hidden.data[3:], 0.0)
        assert np.abs(rep.hidden.data[:3]).sum() > 0

    def test_pad_token_id_irrelevant(self, cfg, params):
        u1 = self.utt([2, 3, 4])
        u2 = self.utt([2, 3, 4])
        u2.tokens[5] = 9  # padded slot, mask still false
        a = encoders.encode_utterance(params, cfg, u1)
        b = encoders.encode_utterance(params, cfg, u2)
        assert a.hidden.data.tobytes() == b.hidden.data.tobytes()

    def test_position_sensitivity(self, cfg, params):
        a = encoders.encode_utterance(params, cfg, self.utt([2, 3, 4, 5]))
        b = encoders.encode_utterance(params, cfg, self.utt([3, 2, 4, 5]))
        assert not np.allclose(a.hidden.data, b.hidden.data)

    def test_token_out_of_vocab(self, cfg, params):
        with pytest.raises(DataError):
            encoders.encode_utterance(params, cfg, self.utt([2, 3, 999]))

    def test_attention_rows_sum_to_one(self, cfg, params):
        trace = ForwardTrace()
        encoders.encode_utterance(params, cfg, self.utt([2, 3, 4, 5, 6]), trace=trace)
        assert trace.attention
        for rows, mask in trace.attention:
            np.testing.assert_allclose(rows.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(rows[:, ~mask] == 0.0)

    def test_single_token_attends_to_self(self, cfg, params):
        trace = ForwardTrace()
        encoders.encode_utterance(params, cfg, self.utt([4]), trace=trace)
        for rows, mask in trace.attention:
            assert rows[0, 0] == 1.0


class TestEmojiLearnability:
    def test_overfits_style_labels(self, tiny_dataset):
        # styles-as-labels: a small head over the conv features should
        # reach high train accuracy quickly with plain gradient steps
        cfg = tiny_cfg()
        samples = data.load_samples(tiny_dataset, cfg)
        model = StickerRanker.build(cfg, seed=5)
        images, labels = [], []
        seen = set()
        for s in samples:
            for img, lab in zip(s.candidates, s.emoji_labels):
                key = img.tobytes()
                if key not in seen:
                    seen.add(key)
                    images.append(img)
                    labels.append(lab)
        from stickerrank import training

        opt = training.Adam(model.params, lr=0.01)
        for _ in range(60):
            model.params.zero_grad()
            losses = []
            for img, lab in zip(images, labels):
                rep = encoders.encode_sticker(model.params, cfg, img)
                logits = encoders.classify_emoji(model.params, cfg, rep.flat)
                losses.append(training.emoji_loss(logits, lab).reshape(1))
            ad.tmean(ad.concat(losses)).backward()
            opt.step(model.params)
        correct = 0
        with ad.no_grad():
            for img, lab in zip(images, labels):
                rep = encoders.encode_sticker(model.params, cfg, img)
                logits = encoders.classify_emoji(model.params, cfg, rep.flat)
                correct += int(np.argmax(logits.data) == lab)
        assert correct / len(images) >= 0.9
