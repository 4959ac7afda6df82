"""Sticker encoder (conv stack + emoji head) and the self-attention
utterance encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import ConfigError, DataError


@dataclass
class StickerRep:
    o: Tensor  # (p, p, d) spatial feature map
    flat: Tensor  # (d,) pooled vector


@dataclass
class UtteranceRep:
    hidden: Tensor  # (T_x, d); masked rows are exactly zero
    mask: np.ndarray  # (T_x,) bool


def init_sticker_encoder(params, rng, cfg, name="cnn"):
    layers.init_conv_stack(params, rng, name, cfg.image_size, cfg.image_channels, cfg.conv_channels, cfg.d, cfg.p)


def init_utterance_encoder(params, rng, cfg, name="utt_enc"):
    layers.init_attention_block(params, rng, name, cfg.d)


def init_emoji_head(params, rng, cfg, name="emoji"):
    if cfg.n_emoji is None:
        raise ConfigError("emoji head requested but n_emoji is not configured")
    layers.init_linear(params, rng, name, cfg.d, cfg.n_emoji)


def encode_sticker(params, cfg, image, name="cnn"):
    """Run the conv stack; keeps the spatial map for interaction and the
    flat vector for classification and feature mixing."""
    o, flat = layers.conv_stack(params, name, image, cfg.image_size, cfg.p)
    return StickerRep(o=o, flat=flat)


def classify_emoji(params, cfg, flat, name="emoji"):
    if f"{name}/w" not in params:
        raise ConfigError("emoji classification enabled but the head was not allocated")
    return layers.linear(params, name, flat)


def mean_pool(rep):
    """Mean of the hidden rows over unmasked words, (d,)."""
    weights = rep.mask.astype(rep.hidden.data.dtype)
    weights = weights / weights.sum()
    return ad.matmul(ad.constant(weights), rep.hidden)


def encode_utterance(params, cfg, utterance, name="utt_enc", *, rng=None, train=False, trace=None):
    """Embed tokens, add sinusoidal positions, run one attention block."""
    tokens = utterance.tokens
    if int(tokens.max(initial=0)) >= params["embed"].shape[0]:
        raise DataError(f"token id {int(tokens.max())} outside the embedding table")
    emb = ad.embedding(params["embed"], tokens)  # (T_x, d)
    pe = layers.positional_encoding(len(tokens), cfg.d, dtype=params.dtype)
    x = emb + ad.constant(pe)
    hidden = layers.attention_block(
        params, name, x, utterance.mask,
        n_head=cfg.n_head, drop_rate=cfg.dropout, rng=rng, train=train, trace=trace,
    )
    return UtteranceRep(hidden=hidden, mask=utterance.mask)
