"""Fusion of per-utterance interaction vectors into a matching score:
recurrent short-term path, attentive long-term path, elementwise
combination, reduction to a matching vector, and gated scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor


@dataclass
class ScoreBreakdown:
    y: Tensor  # (1,) matching score in (0, 1)
    gate: Tensor  # (1,) blend gate in (0, 1)
    match_vec: Tensor  # (d,)
    r_pref_used: Tensor  # (d,) preference vector fed to the gate (zero if none)
    no_history: bool = False
    emoji_logits: Tensor | None = None


def init_fusion(params, rng, cfg):
    if cfg.ablated("fr2t"):
        layers.init_attention_block(params, rng, "fuse_pe", cfg.d)
    elif not cfg.ablated("fr"):
        layers.init_gru(params, rng, "fuse_gru", cfg.d, cfg.d)
        params.add_gaussian(rng, "fuse_gru/h0", (cfg.d,))
    layers.init_attention_block(params, rng, "fuse_attn", cfg.d)
    layers.init_linear(params, rng, "sumulti", 2 * cfg.d, cfg.d)
    layers.init_gru(params, rng, "match_gru", cfg.d, cfg.d)
    layers.init_linear(params, rng, "gate", 2 * cfg.d, 1)
    layers.init_linear(params, rng, "score", cfg.d, 1)


def fuse_short(params, rows, utt_mask):
    """GRU chain over real utterance steps in chronological order.

    Padded steps are skipped (the state carries over) and their output
    rows stay zero, so pad count cannot shift the result.
    """
    state = params["fuse_gru/h0"]
    out = []
    for row, real in zip(rows, utt_mask):
        if real:
            state = layers.gru_cell(params, "fuse_gru", row, state)
            out.append(state)
        else:
            out.append(ad.constant(np.zeros_like(row.data)))
    return ad.stack(out)  # (T_u, d)


def fuse_with_positions(params, cfg, x, utt_mask, *, rng=None, train=False, trace=None):
    """Positionally-encoded attention block; stand-in for the fusion GRU."""
    pe = layers.positional_encoding(x.shape[0], cfg.d, dtype=params.dtype)
    return layers.attention_block(
        params, "fuse_pe", x + ad.constant(pe), utt_mask,
        n_head=cfg.n_head, drop_rate=cfg.dropout, rng=rng, train=train, trace=trace,
    )


def fuse_long(params, cfg, x, utt_mask, *, rng=None, train=False, trace=None):
    """Self-attention over the interaction sequence (no positional encoding)."""
    return layers.attention_block(
        params, "fuse_attn", x, utt_mask,
        n_head=cfg.n_head, drop_rate=cfg.dropout, rng=rng, train=train, trace=trace,
    )


def sumulti_combine(params, g, g_hat):
    """Per-position combination ReLU(W [ (g_hat-g)^2 ; g_hat*g ] + b)."""
    diff = g_hat - g
    features = ad.concat([ad.mul(diff, diff), ad.mul(g_hat, g)], axis=-1)  # (T_u, 2d)
    return ad.relu(layers.linear(params, "sumulti", features))


def match_vector(params, combined, utt_mask):
    """Second GRU chain; returns the state after the last real step."""
    d = combined.shape[-1]
    state = ad.constant(np.zeros(d, dtype=combined.data.dtype))
    for i, real in enumerate(utt_mask):
        if real:
            state = layers.gru_cell(params, "match_gru", combined[i], state)
    return state


def gated_score(params, match_vec, r_used, *, no_history=False, emoji_logits=None):
    """Scalar sigmoid gate blending the matching vector with the preference
    vector, then a scalar sigmoid score of the blend."""
    gate = ad.sigmoid(layers.linear(params, "gate", ad.concat([r_used, match_vec])))  # (1,)
    one = ad.constant(np.ones(1, dtype=gate.data.dtype))
    blend = ad.mul(gate, match_vec) + ad.mul(one - gate, r_used)
    y = ad.sigmoid(layers.linear(params, "score", blend))  # (1,)
    return ScoreBreakdown(
        y=y, gate=gate, match_vec=match_vec, r_pref_used=r_used,
        no_history=no_history, emoji_logits=emoji_logits,
    )
