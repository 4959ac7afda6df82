"""Deep interaction between one candidate sticker and one utterance:
a shared relation matrix, two-way max pooling, and feature mixing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Tensor
from .errors import ShapeError


@dataclass
class InteractionResult:
    features: Tensor  # (d,) per-utterance interaction vector
    word_attention: Tensor  # (T_x,), zero at masked words
    patch_attention: Tensor  # (p*p,)


def init_interaction(params, rng, d, name="din"):
    params.add_gaussian(rng, f"{name}/rel_w", (3 * d,))
    layers.init_linear(params, rng, f"{name}/mix", 4 * d, d)
    layers.init_linear(params, rng, f"{name}/out", 2 * d, d)


def relation_matrix(params, name, units, hidden, word_mask):
    """Pairwise relation scores between sticker units and words.

    Entry (k, j) scores unit k against word j through a single trainable
    vector over [unit ; word ; unit*word]. Masked word columns are filled
    with the most negative finite value so they never win a max.
    """
    d = units.shape[-1]
    if hidden.shape[-1] != d:
        raise ShapeError(f"relation matrix: unit dim {d} != word dim {hidden.shape[-1]}")
    w = params[f"{name}/rel_w"]
    wa, wb, wc = w[0:d], w[d : 2 * d], w[2 * d : 3 * d]
    a = ad.matmul(units, wa).reshape(-1, 1)  # (p*p, 1)
    b = ad.matmul(hidden, wb).reshape(1, -1)  # (1, T_x)
    c = ad.matmul(ad.mul(units, wc), hidden.T)  # (p*p, T_x)
    m = a + b + c
    lowest = np.finfo(m.data.dtype).min
    return ad.masked_fill(m, np.asarray(word_mask, dtype=bool)[None, :], lowest)


def deep_interact(params, cfg, sticker, utt, name="din", trace=None):
    """Two-way max pooling over the relation matrix, then feature mixing."""
    p2 = cfg.p * cfg.p
    units = sticker.o.reshape(p2, cfg.d)
    m = relation_matrix(params, name, units, utt.hidden, utt.mask)

    word_attention = ad.masked_fill(ad.tmax(m, axis=0), utt.mask, 0.0)  # (T_x,)
    patch_attention = ad.tmax(m, axis=1)  # (p*p,)
    sticker_aware_utt = ad.matmul(word_attention, utt.hidden)  # (d,)
    utt_aware_sticker = ad.matmul(patch_attention, units)  # (d,)

    flat = sticker.flat
    mixed = ad.relu(layers.linear(params, f"{name}/mix", ad.concat([
        flat, utt_aware_sticker, ad.mul(flat, utt_aware_sticker), flat + utt_aware_sticker,
    ])))
    features = ad.relu(layers.linear(params, f"{name}/out", ad.concat([mixed, sticker_aware_utt])))

    if trace is not None and trace.candidates:
        trace.candidates[-1]["word_attention"].append(word_attention.data.copy())
        trace.candidates[-1]["patch_attention"].append(patch_attention.data.copy())
    return InteractionResult(features=features, word_attention=word_attention, patch_attention=patch_attention)
