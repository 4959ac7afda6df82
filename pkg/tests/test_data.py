"""Dataset schema, ingestion, negative sampling, synthetic corpus, stats."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stickerrank import data
from stickerrank.config import ModelConfig, SyntheticSpec
from stickerrank.errors import DataError


def tiny_model_cfg(**kw):
    defaults = dict(
        vocab_size=0, d=8, n_head=2, pos_dim=4, image_size=32, image_channels=1,
        p=2, conv_channels=(3, 4), max_utterances=4, max_words=10, max_history=6,
        n_candidates=10, dropout=0.0,
    )
    defaults.update(kw)
    return ModelConfig(**defaults).validate()


def tiny_spec(**kw):
    defaults = dict(n_samples=8, n_users=3, n_styles=3, vocab_size=40,
                    stickers_per_style=5, image_size=32, channels=1,
                    min_history=0, max_history=4)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


class TestPadOrTruncate:
    def test_pad_short(self):
        u = data.pad_or_truncate([5, 6, 7, 8, 9], 30)
        assert u.tokens.shape == (30,)
        assert u.mask[:5].all() and not u.mask[5:].any()
        assert list(u.tokens[:5]) == [5, 6, 7, 8, 9]
        assert (u.tokens[5:] == 0).all()

    def test_truncate_keeps_first(self):
        toks = list(range(2, 42))
        u = data.pad_or_truncate(toks, 30)
        assert list(u.tokens) == toks[:30]
        assert u.mask.all()

    def test_empty_input(self):
        u = data.pad_or_truncate([], 30)
        assert not u.mask.any()

    def test_idempotent(self):
        u1 = data.pad_or_truncate(list(range(3, 20)), 8)
        u2 = data.pad_or_truncate(list(u1.tokens[u1.mask]), 8)
        np.testing.assert_array_equal(u1.tokens, u2.tokens)
        np.testing.assert_array_equal(u1.mask, u2.mask)

    @given(st.lists(st.integers(min_value=1, max_value=99), max_size=50), st.integers(min_value=1, max_value=40))
    @settings(max_examples=50, deadline=None)
    def test_invariants_hold(self, toks, max_len):
        u = data.pad_or_truncate(toks, max_len)
        assert len(u.tokens) == max_len
        n = u.mask.sum()
        assert u.mask[:n].all() and not u.mask[n:].any()


class TestNegativeSampling:
    def make_pool(self, n, rng):
        return [rng.random((4, 4, 1)) for _ in range(n)]

    def test_pool_draw(self):
        rng = np.random.default_rng(0)
        pool = self.make_pool(49, rng)
        truth = rng.random((4, 4, 1))
        candidates, idx = data.sample_negatives(pool, truth, 9, rng)
        assert len(candidates) == 10
        assert candidates[idx] is truth

    def test_exhaustive_draw(self):
        rng = np.random.default_rng(0)
        pool = self.make_pool(9, rng)
        truth = rng.random((4, 4, 1))
        candidates, idx = data.sample_negatives(pool, truth, 9, rng)
        got = {c.tobytes() for i, c in enumerate(candidates) if i != idx}
        assert got == {p.tobytes() for p in pool}

    def test_insufficient_pool(self):
        rng = np.random.default_rng(0)
        pool = self.make_pool(5, rng)
        with pytest.raises(DataError, match="5"):
            data.sample_negatives(pool, rng.random((4, 4, 1)), 9, rng)

    def test_same_seed_same_order(self):
        pool = self.make_pool(20, np.random.default_rng(1))
        truth = np.random.default_rng(2).random((4, 4, 1))
        a, ia = data.sample_negatives(pool, truth, 9, np.random.default_rng(7))
        b, ib = data.sample_negatives(pool, truth, 9, np.random.default_rng(7))
        assert ia == ib
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_truth_never_among_negatives(self):
        rng = np.random.default_rng(3)
        truth = rng.random((4, 4, 1))
        pool = self.make_pool(15, rng) + [truth.copy(), truth.copy()]
        for trial in range(20):
            candidates, idx = data.sample_negatives(pool, truth, 9, rng)
            negs = [c for i, c in enumerate(candidates) if i != idx]
            assert all(n.tobytes() != truth.tobytes() for n in negs)


class TestManifestLoading:
    def write_dataset(self, tmp_path, records, vocab_tokens=None):
        d = tmp_path / "ds"
        (d / "images").mkdir(parents=True)
        rng = np.random.default_rng(0)
        for i in range(12):
            data.save_image(str(d / "images" / f"s{i}.png"), rng.random((32, 32, 1)))
        tokens = vocab_tokens or [data.PAD_TOKEN, data.OOV_TOKEN, "hello", "world", "ok"]
        data.Vocabulary(tokens).save(str(d / data.VOCAB_NAME))
        with open(d / data.MANIFEST_NAME, "w") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")
        return str(d)

    def record(self, **kw):
        r = {
            "context": ["hello world", "ok ok"],
            "candidates": [f"images/s{i}.png" for i in range(10)],
            "truth_index": 3,
            "history": [{"context": ["hello"], "sticker": "images/s11.png"}],
            "user_id": "u1",
        }
        r.update(kw)
        return r

    def test_two_records(self, tmp_path):
        path = self.write_dataset(tmp_path, [self.record(), self.record(truth_index=0)])
        samples = data.load_samples(path, tiny_model_cfg())
        assert len(samples) == 2
        assert samples[0].sid == 0 and samples[1].sid == 1
        assert samples[0].truth_index == 3
        assert samples[0].candidates[0].shape == (32, 32, 1)
        assert samples[0].history[0].position_index == 1

    def test_wrong_candidate_count(self, tmp_path):
        bad = self.record(candidates=[f"images/s{i}.png" for i in range(9)])
        path = self.write_dataset(tmp_path, [self.record(), bad])
        with pytest.raises(DataError, match="line 2"):
            data.load_samples(path, tiny_model_cfg())

    def test_truth_out_of_range(self, tmp_path):
        path = self.write_dataset(tmp_path, [self.record(truth_index=10)])
        with pytest.raises(DataError, match="truth_index"):
            data.load_samples(path, tiny_model_cfg())

    def test_missing_image(self, tmp_path):
        path = self.write_dataset(tmp_path, [self.record(candidates=[f"images/s{i}.png" for i in range(9)] + ["images/nope.png"])])
        with pytest.raises(DataError, match="missing image"):
            data.load_samples(path, tiny_model_cfg())

    def test_oov_tokens_map_to_oov(self, tmp_path):
        path = self.write_dataset(tmp_path, [self.record(context=["zzz hello"])])
        s = data.load_samples(path, tiny_model_cfg())[0]
        assert s.context.utterances[0].tokens[0] == data.OOV_ID

    def test_history_capped_to_most_recent(self, tmp_path):
        hist = [{"context": [f"hello {i}"], "sticker": f"images/s{i}.png"} for i in range(8)]
        path = self.write_dataset(tmp_path, [self.record(history=hist)])
        cfg = tiny_model_cfg(max_history=3)
        s = data.load_samples(path, cfg)[0]
        assert len(s.history) == 3
        assert [h.sticker_path for h in s.history] == ["images/s5.png", "images/s6.png", "images/s7.png"]
        assert [h.position_index for h in s.history] == [1, 2, 3]


class TestSyntheticCorpus:
    def test_sample_count_and_invariants(self, tmp_path):
        spec = tiny_spec(n_samples=16)
        ds = data.generate_synthetic(spec, seed=5)
        assert len(ds.records) == 16
        out = str(tmp_path / "syn")
        data.write_dataset(ds, out)
        cfg = tiny_model_cfg()
        samples = data.load_samples(out, cfg)
        assert len(samples) == 16
        for s in samples:
            assert 0 <= s.truth_index < 10
            assert len(s.candidates) == 10
            n = s.history_mask.sum()
            assert s.history_mask[:n].all() and not s.history_mask[n:].any()
            assert len(s.history) == n
            assert [h.position_index for h in s.history] == list(range(1, n + 1))
            assert s.emoji_labels is not None and len(s.emoji_labels) == 10

    def test_determinism(self):
        spec = tiny_spec()
        a = data.generate_synthetic(spec, seed=9)
        b = data.generate_synthetic(tiny_spec(), seed=9)
        assert data.manifest_text(a) == data.manifest_text(b)
        for path in a.images:
            assert a.images[path].tobytes() == b.images[path].tobytes()

    def test_planted_rule_is_perfect_at_full_signal(self, tmp_path):
        spec = tiny_spec(n_samples=24, signal=1.0)
        ds = data.generate_synthetic(spec, seed=11)
        out = str(tmp_path / "syn")
        data.write_dataset(ds, out)
        cfg = tiny_model_cfg()
        rule = data.PlantedRule.load(out, cfg)
        hits = 0
        for s in data.load_dataset(out, cfg):
            scores = rule.score_sample(s)
            hits += int(np.argmax(scores) == s.truth_index)
        assert hits == 24

    def test_emoji_labels_match_styles(self):
        ds = data.generate_synthetic(tiny_spec(), seed=2)
        style_of = {path: s for s, path in [(int(p.split("style")[1].split("_")[0]), p) for p in ds.images]}
        for r in ds.records:
            assert r["emoji_labels"] == [style_of[c] for c in r["candidates"]]


class TestSweepHelpers:
    def build_sample(self):
        ds = data.generate_synthetic(tiny_spec(n_samples=4, min_history=3, max_history=5, min_utterances=3, max_utterances=4), seed=3)
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            data.write_dataset(ds, tmp)
            return data.load_samples(tmp, tiny_model_cfg())[0]

    def test_limit_utterances(self):
        s = self.build_sample()
        n_before = s.context.n_real
        cut = data.limit_utterances(s, 2)
        assert cut.context.n_real == min(2, n_before)
        # kept the LAST utterances
        real_before = [u.tokens[u.mask].tolist() for u, m in zip(s.context.utterances, s.context.utterance_mask) if m]
        real_after = [u.tokens[u.mask].tolist() for u, m in zip(cut.context.utterances, cut.context.utterance_mask) if m]
        assert real_after == real_before[-2:]

    def test_limit_history(self):
        s = self.build_sample()
        cut = data.limit_history(s, 2)
        assert len(cut.history) == min(2, len(s.history))
        assert [h.position_index for h in cut.history] == list(range(1, len(cut.history) + 1))
        assert [h.sticker_path for h in cut.history] == [h.sticker_path for h in s.history[-2:]]

    def test_limit_history_zero(self):
        s = self.build_sample()
        cut = data.limit_history(s, 0)
        assert len(cut.history) == 0
        assert not cut.history_mask.any()


class TestStats:
    def test_single_sample_average(self):
        records = [{"context": ["a b c d"], "candidates": [], "truth_index": 0, "user_id": "u"}]
        report = data.dataset_stats(records)
        assert report.n_samples == 1
        assert report.avg_words_per_utterance == 4.0
        assert report.history_coverage == 0.0

    def test_history_stats(self):
        records = [
            {"context": ["a b"], "history": [{}, {}], "user_id": "u"},
            {"context": ["a"], "history": [], "user_id": "v"},
            {"context": ["a b c"], "history": [{}], "user_id": "w", "speakers": ["s1"]},
        ]
        report = data.dataset_stats(records)
        assert report.history_histogram == {0: 1, 1: 1, 2: 1}
        assert report.history_coverage == pytest.approx(2 / 3)
        assert report.avg_history_len == pytest.approx(1.0)
        assert report.avg_history_len_nonzero == pytest.approx(1.5)
        assert report.avg_users == 1.0

    def test_empty_dataset_raises(self):
        with pytest.raises(DataError):
            data.dataset_stats([])

    def test_vocab_roundtrip(self, tmp_path):
        v = data.Vocabulary([data.PAD_TOKEN, data.OOV_TOKEN, "x", "y"])
        p = str(tmp_path / "vocab.txt")
        v.save(p)
        v2 = data.Vocabulary.load(p)
        assert v2.tokens == v.tokens
        assert v2.encode("y zzz x") == [3, data.OOV_ID, 2]
