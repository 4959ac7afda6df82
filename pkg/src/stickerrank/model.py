"""Full ranking model: parameter allocation per wiring flags and the
per-sample forward that scores every candidate sticker."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import encoders, fusion, interaction, layers, memory
from .errors import ConfigError
from .params import ParamSet


def build_params(cfg, seed):
    """Allocate exactly the parameters the configured wiring uses."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    params = ParamSet(dtype=np.dtype(cfg.float_width))

    params.add_gaussian(rng, "embed", (cfg.vocab_size, cfg.d))
    encoders.init_utterance_encoder(params, rng, cfg, "utt_enc")
    encoders.init_sticker_encoder(params, rng, cfg, "cnn")
    if not cfg.share_context_encoder:
        encoders.init_utterance_encoder(params, rng, cfg, "hist_enc")
    if not cfg.share_sticker_encoder:
        encoders.init_sticker_encoder(params, rng, cfg, "hist_cnn")
    if cfg.n_emoji is not None:
        encoders.init_emoji_head(params, rng, cfg, "emoji")

    if cfg.ablated("din"):
        layers.init_linear(params, rng, "din_alt", 2 * cfg.d, cfg.d)
    else:
        interaction.init_interaction(params, rng, cfg.d, "din")

    if not cfg.ablated("upm"):
        memory.init_memory(params, rng, cfg)
        layers.init_linear(params, rng, "r_proj", cfg.d, cfg.d)

    fusion.init_fusion(params, rng, cfg)
    return params


class StickerRanker:
    """Scores each candidate sticker against a dialog context and the
    user's preference memory."""

    def __init__(self, cfg, params):
        self.cfg = cfg.validate()
        self.params = params

    @classmethod
    def build(cls, cfg, seed):
        return cls(cfg, build_params(cfg, seed))

    @property
    def dtype(self):
        return self.params.dtype

    def _zeros(self, n):
        return ad.constant(np.zeros(n, dtype=self.dtype))

    # -- forward ------------------------------------------------------------

    def encode_context(self, sample, *, rng=None, train=False, trace=None):
        reps = []
        for utt, real in zip(sample.context.utterances, sample.context.utterance_mask):
            if real:
                reps.append(encoders.encode_utterance(
                    self.params, self.cfg, utt, "utt_enc", rng=rng, train=train, trace=trace))
            else:
                reps.append(None)
        return reps

    def preference_vector(self, sample, reps, *, rng=None, train=False, trace=None):
        """Preference representation fed to the gate; exact zero when the
        module is ablated or the user has no history."""
        cfg = self.cfg
        if cfg.ablated("upm"):
            return self._zeros(cfg.d), len(sample.history) == 0
        if cfg.memory_variant == "most_selected":
            raise ConfigError("memory variant 'most_selected' bypasses the model; "
                              "score it through evaluation.most_selected_scorer")
        enc_name = "utt_enc" if cfg.share_context_encoder else "hist_enc"
        cnn_name = "cnn" if cfg.share_sticker_encoder else "hist_cnn"
        query = memory.build_query(reps, sample.context.utterance_mask)
        mem = memory.encode_history(
            self.params, cfg, sample.history,
            enc_name=enc_name, cnn_name=cnn_name, rng=rng, train=train, trace=trace,
        )
        r_pref, has_history = memory.preference_read(self.params, cfg, cfg.memory_variant, query, mem, trace)
        if not has_history:
            return self._zeros(cfg.d), True
        return layers.linear(self.params, "r_proj", r_pref), False

    def score_candidate(self, image, reps, utt_mask, r_used, no_history, *,
                        rng=None, train=False, trace=None, want_emoji=False):
        cfg = self.cfg
        params = self.params
        if trace is not None:
            trace.start_candidate()
        sticker = encoders.encode_sticker(params, cfg, image, "cnn")
        emoji_logits = None
        if want_emoji and cfg.n_emoji is not None:
            emoji_logits = encoders.classify_emoji(params, cfg, sticker.flat)

        rows = []
        for rep, real in zip(reps, utt_mask):
            if not real:
                rows.append(self._zeros(cfg.d))
                continue
            if cfg.ablated("din"):
                pooled = encoders.mean_pool(rep)
                rows.append(ad.relu(layers.linear(params, "din_alt", ad.concat([sticker.flat, pooled]))))
            else:
                rows.append(interaction.deep_interact(params, cfg, sticker, rep, "din", trace).features)

        seq = ad.stack(rows)  # (T_u, d)
        if cfg.ablated("fr2t"):
            g = fusion.fuse_with_positions(params, cfg, seq, utt_mask, rng=rng, train=train, trace=trace)
        elif cfg.ablated("fr"):
            g = seq
        else:
            g = fusion.fuse_short(params, rows, utt_mask)
        g_hat = fusion.fuse_long(params, cfg, seq, utt_mask, rng=rng, train=train, trace=trace)
        combined = fusion.sumulti_combine(params, g, g_hat)
        match_vec = fusion.match_vector(params, combined, utt_mask)
        breakdown = fusion.gated_score(params, match_vec, r_used,
                                       no_history=no_history, emoji_logits=emoji_logits)
        if trace is not None:
            trace.candidates[-1]["gate"] = float(breakdown.gate.data[0])
            trace.candidates[-1]["score"] = float(breakdown.y.data[0])
        return breakdown

    def score_sample(self, sample, *, train=False, rng=None, trace=None, want_emoji=False):
        """Score every candidate; returns a ScoreBreakdown per candidate."""
        if train and rng is None:
            rng = np.random.default_rng(0)
        reps = self.encode_context(sample, rng=rng, train=train, trace=trace)
        r_used, no_history = self.preference_vector(sample, reps, rng=rng, train=train, trace=trace)
        utt_mask = sample.context.utterance_mask
        return [
            self.score_candidate(img, reps, utt_mask, r_used, no_history,
                                 rng=rng, train=train, trace=trace, want_emoji=want_emoji)
            for img in sample.candidates
        ]

    def scores_array(self, sample):
        """Plain float scores for ranking (no graph, dropout off)."""
        with ad.no_grad():
            breakdowns = self.score_sample(sample, train=False)
        return np.array([float(b.y.data[0]) for b in breakdowns])
