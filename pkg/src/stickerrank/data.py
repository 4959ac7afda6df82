"""Dataset schema, manifest ingestion, negative sampling, synthetic corpus
generation, and corpus statistics.

On disk a dataset is a directory:

    manifest.jsonl        one JSON record per line (see load_dataset)
    vocab.txt             one token per line; line number = token id
    emoji_labels.txt      optional; one label name per line
    images/*.png          sticker images
    synthetic_meta.json   optional; generator provenance for synthetic sets

Manifest record:
    {"context": [utterance, ...], "candidates": [image path, ...],
     "truth_index": int, "history": [{"context": [...], "sticker": path}, ...],
     "user_id": str, "emoji_labels": [int, ...] (optional),
     "speakers": [str, ...] (optional, same length as context)}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"
PAD_ID = 0
OOV_ID = 1

MANIFEST_NAME = "manifest.jsonl"
VOCAB_NAME = "vocab.txt"
EMOJI_NAME = "emoji_labels.txt"
META_NAME = "synthetic_meta.json"


# -- schema types -----------------------------------------------------------


@dataclass
class Utterance:
    tokens: np.ndarray  # (max_words,) int64, zero-padded
    mask: np.ndarray  # (max_words,) bool, prefix of trues

    @property
    def n_words(self):
        return int(self.mask.sum())


@dataclass
class DialogContext:
    utterances: list  # T_u Utterances, padded at the tail
    utterance_mask: np.ndarray  # (T_u,) bool, prefix of trues

    @property
    def n_real(self):
        return int(self.utterance_mask.sum())


@dataclass
class HistoryPair:
    context: DialogContext
    sticker_image: np.ndarray  # (H, W, C) float in [0, 1]
    sticker_path: str
    position_index: int  # 1 = oldest retained


@dataclass
class Sample:
    sid: int
    context: DialogContext
    candidates: list  # T_c images
    candidate_paths: list
    truth_index: int
    history: list  # up to T_h HistoryPairs, oldest first
    history_mask: np.ndarray  # (T_h,) bool
    user_id: str
    emoji_labels: list | None = None
    raw_context: list = field(default_factory=list)


# -- vocabulary ---------------------------------------------------------------


class Vocabulary:
    """Token table backed by a one-token-per-line file."""

    def __init__(self, tokens):
        if len(tokens) < 2 or tokens[PAD_ID] != PAD_TOKEN or tokens[OOV_ID] != OOV_TOKEN:
            raise DataError(f"vocabulary must start with '{PAD_TOKEN}' and '{OOV_TOKEN}' lines")
        self.tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.rstrip("\n")])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.tokens:
                f.write(tok + "\n")

    def encode(self, text):
        """Whitespace tokenization; unknown tokens map to the OOV id."""
        return [self._index.get(tok, OOV_ID) for tok in text.split()]


def pad_or_truncate(raw_tokens, max_len):
    """Fit a token-id list to exactly ``max_len`` entries.

    Longer inputs keep their first ``max_len`` tokens; shorter ones are
    zero-padded with a prefix-of-trues mask. Idempotent.
    """
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    kept = list(raw_tokens[:max_len])
    tokens = np.zeros(max_len, dtype=np.int64)
    tokens[: len(kept)] = kept
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(kept)] = True
    return Utterance(tokens=tokens, mask=mask)


def build_context(token_lists, max_utterances, max_words):
    """Pad/truncate utterance token-id lists into a DialogContext.

    Keeps the most recent ``max_utterances`` utterances. Requires at
    least one utterance with at least one token.
    """
    kept = token_lists[-max_utterances:]
    utterances = [pad_or_truncate(toks, max_words) for toks in kept]
    if not any(u.mask.any() for u in utterances):
        raise DataError("dialog context has no real tokens")
    # drop empty utterances so the mask stays a prefix of trues
    utterances = [u for u in utterances if u.mask.any()]
    n_real = len(utterances)
    empty = Utterance(tokens=np.zeros(max_words, dtype=np.int64), mask=np.zeros(max_words, dtype=bool))
    utterances = utterances + [empty] * (max_utterances - n_real)
    mask = np.zeros(max_utterances, dtype=bool)
    mask[:n_real] = True
    return DialogContext(utterances=utterances, utterance_mask=mask)


# -- images -------------------------------------------------------------------


class ImageCache:
    """Decode PNGs to float arrays in [0, 1], memoized by path and target."""

    def __init__(self):
        self._cache = {}

    def load(self, path, size, channels, dtype=np.float64):
        key = (path, size, channels, np.dtype(dtype).name)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        try:
            with Image.open(path) as img:
                img = img.convert("L" if channels == 1 else "RGB")
                if img.size != (size, size):
                    img = img.resize((size, size), Image.BILINEAR)
                arr = np.asarray(img, dtype=dtype) / 255.0
        except FileNotFoundError:
            raise DataError(f"missing image file: {path}") from None
        except OSError as e:
            raise DataError(f"cannot decode image {path}: {e}") from None
        if channels == 1:
            arr = arr[:, :, None]
        arr.setflags(write=False)
        self._cache[key] = arr
        return arr


def save_image(path, array):
    """Write an (H, W, C) float array in [0, 1] as a PNG."""
    arr = np.clip(np.asarray(array), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(data, mode="RGB").save(path)


# -- manifest ingestion -------------------------------------------------------


def load_dataset(path, model_cfg, cache=None, dtype=None):
    """Stream Samples from a dataset directory in stored order."""
    cache = cache or ImageCache()
    dtype = dtype or np.dtype(model_cfg.float_width)
    vocab = Vocabulary.load(os.path.join(path, VOCAB_NAME))
    if model_cfg.vocab_size and model_cfg.vocab_size != len(vocab):
        raise DataError(f"vocab file has {len(vocab)} tokens, config expects {model_cfg.vocab_size}")
    manifest = os.path.join(path, MANIFEST_NAME)

    def image(rel):
        return cache.load(os.path.join(path, rel), model_cfg.image_size, model_cfg.image_channels, dtype)

    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{manifest} line {lineno}: invalid JSON ({e})") from e
            try:
                yield _record_to_sample(record, lineno - 1, model_cfg, vocab, image)
            except DataError as e:
                raise DataError(f"{manifest} line {lineno}: {e}") from None


def _record_to_sample(record, sid, cfg, vocab, image):
    for key in ("context", "candidates", "truth_index", "user_id"):
        if key not in record:
            raise DataError(f"record missing '{key}'")
    candidates = record["candidates"]
    if len(candidates) != cfg.n_candidates:
        raise DataError(f"record has {len(candidates)} candidates, expected {cfg.n_candidates}")
    truth = record["truth_index"]
    if not (0 <= truth < len(candidates)):
        raise DataError(f"truth_index {truth} out of range")
    token_lists = [vocab.encode(u) for u in record["context"]]
    context = build_context(token_lists, cfg.max_utterances, cfg.max_words)

    history_records = record.get("history", [])[-cfg.max_history :]
    history = []
    for pos, h in enumerate(history_records, start=1):
        hctx = build_context([vocab.encode(u) for u in h["context"]], cfg.max_utterances, cfg.max_words)
        history.append(
            HistoryPair(context=hctx, sticker_image=image(h["sticker"]), sticker_path=h["sticker"], position_index=pos)
        )
    history_mask = np.zeros(cfg.max_history, dtype=bool)
    history_mask[: len(history)] = True

    labels = record.get("emoji_labels")
    if labels is not None:
        if len(labels) != len(candidates):
            raise DataError(f"emoji_labels has {len(labels)} entries for {len(candidates)} candidates")
        if cfg.n_emoji is not None and any(not (0 <= l < cfg.n_emoji) for l in labels):
            raise DataError("emoji label out of range")

    return Sample(
        sid=sid,
        context=context,
        candidates=[image(c) for c in candidates],
        candidate_paths=list(candidates),
        truth_index=truth,
        history=history,
        history_mask=history_mask,
        user_id=record["user_id"],
        emoji_labels=list(labels) if labels is not None else None,
        raw_context=list(record["context"]),
    )


def load_samples(path, model_cfg, cache=None, dtype=None):
    return list(load_dataset(path, model_cfg, cache=cache, dtype=dtype))


# -- re-masking helpers for sweeps --------------------------------------------


def limit_utterances(sample, n):
    """Keep only the last ``n`` real utterances of the current context
    and of every history context."""
    def cut(ctx):
        real = [u for u, m in zip(ctx.utterances, ctx.utterance_mask) if m][-n:]
        T_u, T_x = len(ctx.utterances), len(ctx.utterances[0].tokens)
        empty = Utterance(tokens=np.zeros(T_x, dtype=np.int64), mask=np.zeros(T_x, dtype=bool))
        mask = np.zeros(T_u, dtype=bool)
        mask[: len(real)] = True
        return DialogContext(utterances=real + [empty] * (T_u - len(real)), utterance_mask=mask)

    history = [
        HistoryPair(context=cut(h.context), sticker_image=h.sticker_image,
                    sticker_path=h.sticker_path, position_index=h.position_index)
        for h in sample.history
    ]
    return Sample(
        sid=sample.sid, context=cut(sample.context), candidates=sample.candidates,
        candidate_paths=sample.candidate_paths, truth_index=sample.truth_index,
        history=history, history_mask=sample.history_mask, user_id=sample.user_id,
        emoji_labels=sample.emoji_labels, raw_context=sample.raw_context,
    )


def limit_history(sample, n):
    """Keep only the ``n`` most recent history pairs, renumbered from 1."""
    kept = sample.history[len(sample.history) - min(n, len(sample.history)) :]
    history = [
        HistoryPair(context=h.context, sticker_image=h.sticker_image,
                    sticker_path=h.sticker_path, position_index=i + 1)
        for i, h in enumerate(kept)
    ]
    mask = np.zeros(len(sample.history_mask), dtype=bool)
    mask[: len(history)] = True
    return Sample(
        sid=sample.sid, context=sample.context, candidates=sample.candidates,
        candidate_paths=sample.candidate_paths, truth_index=sample.truth_index,
        history=history, history_mask=mask, user_id=sample.user_id,
        emoji_labels=sample.emoji_labels, raw_context=sample.raw_context,
    )


# -- negative sampling ---------------------------------------------------------


def sample_negatives(sticker_set, truth, k, rng):
    """Draw ``k`` distinct negatives (never byte-equal to the truth) and
    insert the truth at a random slot. Returns (candidates, truth_index)."""
    truth_bytes = np.asarray(truth).tobytes()
    pool = [s for s in sticker_set if np.asarray(s).tobytes() != truth_bytes]
    if len(pool) < k:
        raise DataError(f"need {k} negatives but the sticker set has only {len(pool)} non-truth entries")
    picks = rng.choice(len(pool), size=k, replace=False)
    negatives = [pool[i] for i in picks]
    truth_index = int(rng.integers(0, k + 1))
    candidates = negatives[:truth_index] + [truth] + negatives[truth_index:]
    return candidates, truth_index


# -- synthetic corpus -----------------------------------------------------------


def _style_params(n_styles):
    return [
        {"angle": np.pi * s / n_styles, "freq": 3.0 + 2.0 * (s % 3), "phase": 0.7 * s}
        for s in range(n_styles)
    ]


def style_prototype(param, size, channels):
    """Noiseless grating pattern for one style."""
    u, v = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")
    wave = np.sin(2 * np.pi * param["freq"] * (u * np.cos(param["angle"]) + v * np.sin(param["angle"])) + param["phase"])
    img = 0.5 + 0.45 * wave
    return np.repeat(img[:, :, None], channels, axis=2)


def _style_vocab(spec):
    """Vocabulary: pad, oov, per-style clusters, then shared filler words."""
    tokens = [PAD_TOKEN, OOV_TOKEN]
    clusters = []
    cluster_size = max(2, (spec.vocab_size - 2) // (spec.n_styles + 1))
    for s in range(spec.n_styles):
        lo = len(tokens)
        tokens.extend(f"s{s}w{i}" for i in range(cluster_size))
        clusters.append((lo, len(tokens)))
    fill = 0
    while len(tokens) < spec.vocab_size:
        tokens.append(f"w{fill}")
        fill += 1
    return Vocabulary(tokens), clusters


class SyntheticDataset:
    """In-memory synthetic corpus plus everything needed to write or score it."""

    def __init__(self, spec, records, images, vocab, clusters, style_params):
        self.spec = spec
        self.records = records  # manifest-shaped dicts
        self.images = images  # path -> float array
        self.vocab = vocab
        self.clusters = clusters  # per style: (lo, hi) token-id range
        self.style_params = style_params

    def meta(self):
        return {
            "image_size": self.spec.image_size,
            "channels": self.spec.channels,
            "signal": self.spec.signal,
            "styles": [
                {"angle": p["angle"], "freq": p["freq"], "phase": p["phase"], "token_ids": list(c)}
                for p, c in zip(self.style_params, self.clusters)
            ],
        }


def generate_synthetic(spec, seed):
    """Procedural corpus with a planted context-style-image rule.

    Each style owns a grating pattern and a token cluster; each user has a
    style preference, and at signal strength 1.0 the context tokens fully
    determine the style of the true sticker while negatives come from
    other styles, so the planted rule ranks the truth first every time.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    params = _style_params(spec.n_styles)
    vocab, clusters = _style_vocab(spec)

    images = {}
    pool = []  # (style, path)
    for s, p in enumerate(params):
        proto = style_prototype(p, spec.image_size, spec.channels)
        for i in range(spec.stickers_per_style):
            noisy = np.clip(proto + rng.uniform(-spec.noise, spec.noise, size=proto.shape), 0.0, 1.0)
            path = f"images/style{s}_{i}.png"
            images[path] = noisy
            pool.append((s, path))

    prefs = rng.dirichlet(np.ones(spec.n_styles) * 0.8, size=spec.n_users)

    def draw_style(user):
        return int(rng.choice(spec.n_styles, p=prefs[user]))

    filler_lo = clusters[-1][1]
    has_fillers = filler_lo < len(vocab)

    def make_context(style):
        n_utts = int(rng.integers(spec.min_utterances, spec.max_utterances + 1))
        lo, hi = clusters[style]
        lines = []
        for u in range(n_utts):
            n_words = int(rng.integers(spec.min_words, spec.max_words + 1))
            words = []
            for w in range(n_words):
                if rng.random() < 0.5 or not has_fillers:
                    words.append(vocab.tokens[int(rng.integers(lo, hi))])
                else:
                    words.append(vocab.tokens[int(rng.integers(filler_lo, len(vocab)))])
            lines.append(" ".join(words))
        # guarantee the style is announced at least once
        first = lines[0].split()
        first[0] = vocab.tokens[int(rng.integers(lo, hi))]
        lines[0] = " ".join(first)
        return lines

    def pick_sticker(user, style, last_pick):
        prev = last_pick.get((user, style))
        if prev is not None and rng.random() < spec.repeat_rate:
            return prev
        options = [path for st, path in pool if st == style]
        return options[int(rng.integers(0, len(options)))]

    style_of = {path: st for st, path in pool}
    records = []
    last_pick = {}
    for _ in range(spec.n_samples):
        user = int(rng.integers(0, spec.n_users))
        n_hist = int(rng.integers(spec.min_history, spec.max_history + 1))
        history = []
        for _h in range(n_hist):
            h_style = draw_style(user)
            h_sticker = pick_sticker(user, h_style, last_pick)
            last_pick[(user, h_style)] = h_sticker
            history.append({"context": make_context(h_style), "sticker": h_sticker})

        ctx_style = draw_style(user)
        if rng.random() < spec.signal:
            truth_style = ctx_style
        else:
            others = [s for s in range(spec.n_styles) if s != ctx_style]
            truth_style = int(rng.choice(others))
        context = make_context(ctx_style)
        truth_path = pick_sticker(user, truth_style, last_pick)
        last_pick[(user, truth_style)] = truth_path

        if spec.signal >= 1.0:
            negative_pool = [path for st, path in pool if st != truth_style]
        else:
            negative_pool = [path for _st, path in pool if path != truth_path]
        candidates, truth_index = sample_negatives(negative_pool, truth_path, spec.n_candidates - 1, rng)

        records.append(
            {
                "context": context,
                "candidates": candidates,
                "truth_index": truth_index,
                "history": history,
                "user_id": f"user{user}",
                "emoji_labels": [style_of[c] for c in candidates],
            }
        )
    return SyntheticDataset(spec, records, images, vocab, clusters, params)


def write_dataset(ds, out_dir):
    """Write a SyntheticDataset as a loadable dataset directory."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for path, arr in ds.images.items():
        save_image(os.path.join(out_dir, path), arr)
    ds.vocab.save(os.path.join(out_dir, VOCAB_NAME))
    with open(os.path.join(out_dir, EMOJI_NAME), "w", encoding="utf-8") as f:
        for s in range(ds.spec.n_styles):
            f.write(f"style-{s}\n")
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        for record in ds.records:
            f.write(json.dumps(record) + "\n")
    with open(os.path.join(out_dir, META_NAME), "w", encoding="utf-8") as f:
        json.dump(ds.meta(), f, indent=2)


def manifest_text(ds):
    return "".join(json.dumps(r) + "\n" for r in ds.records)


class PlantedRule:
    """The generator's own decision rule: read the style off the context
    tokens, then pick the candidate image closest to that style's pattern."""

    def __init__(self, meta, image_size, channels):
        self.clusters = [tuple(s["token_ids"]) for s in meta["styles"]]
        self.protos = [style_prototype(s, image_size, channels) for s in meta["styles"]]

    @classmethod
    def load(cls, dataset_dir, model_cfg):
        with open(os.path.join(dataset_dir, META_NAME)) as f:
            meta = json.load(f)
        return cls(meta, model_cfg.image_size, model_cfg.image_channels)

    def context_style(self, sample):
        votes = np.zeros(len(self.clusters))
        for utt, real in zip(sample.context.utterances, sample.context.utterance_mask):
            if not real:
                continue
            for tok in utt.tokens[utt.mask]:
                for s, (lo, hi) in enumerate(self.clusters):
                    if lo <= tok < hi:
                        votes[s] += 1
        return int(votes.argmax()) if votes.any() else None

    def score_sample(self, sample):
        style = self.context_style(sample)
        if style is None:
            return np.zeros(len(sample.candidates))
        proto = self.protos[style]
        return np.array([-float(((img - proto) ** 2).sum()) for img in sample.candidates])


# -- statistics ------------------------------------------------------------------


@dataclass
class StatsReport:
    n_samples: int
    avg_words_per_utterance: float
    avg_users: float | None
    history_histogram: dict
    history_coverage: float
    avg_history_len: float
    avg_history_len_nonzero: float

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "avg_words_per_utterance": self.avg_words_per_utterance,
            "avg_users": self.avg_users,
            "history_histogram": {str(k): v for k, v in sorted(self.history_histogram.items())},
            "history_coverage": self.history_coverage,
            "avg_history_len": self.avg_history_len,
            "avg_history_len_nonzero": self.avg_history_len_nonzero,
        }


def iter_manifest(path):
    manifest = os.path.join(path, MANIFEST_NAME) if os.path.isdir(path) else path
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{manifest} line {lineno}: invalid JSON ({e})") from e


def dataset_stats(records):
    """Corpus statistics over raw manifest records (path or iterable)."""
    if isinstance(records, (str, os.PathLike)):
        records = iter_manifest(records)
    n_samples = 0
    word_total = 0
    utt_total = 0
    users_total = 0
    users_known = 0
    hist = {}
    with_history = 0
    hist_total = 0
    for record in records:
        n_samples += 1
        for utt in record["context"]:
            word_total += len(utt.split())
            utt_total += 1
        speakers = record.get("speakers")
        if speakers:
            users_total += len(set(speakers))
            users_known += 1
        h = len(record.get("history", []))
        hist[h] = hist.get(h, 0) + 1
        hist_total += h
        if h > 0:
            with_history += 1
    if n_samples == 0:
        raise DataError("dataset_stats: empty dataset")
    return StatsReport(
        n_samples=n_samples,
        avg_words_per_utterance=word_total / max(utt_total, 1),
        avg_users=(users_total / users_known) if users_known else None,
        history_histogram=hist,
        history_coverage=with_history / n_samples,
        avg_history_len=hist_total / n_samples,
        avg_history_len_nonzero=(hist_total / with_history) if with_history else 0.0,
    )
