"""User preference memory: history encoding with position-aware GRU chains,
key-value addressing and reading, and the simpler read variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders, layers
from .autodiff import Tensor
from .errors import DataError


@dataclass
class PreferenceMemory:
    keys: Tensor  # (T_h, d); masked slots are zero rows
    values: Tensor  # (T_h, d)
    slot_mask: np.ndarray  # (T_h,) bool

    @property
    def empty(self):
        return not self.slot_mask.any()


@dataclass
class QueryVector:
    h: Tensor  # (d,)


def init_memory(params, rng, cfg):
    if not cfg.ablated("tar"):
        params.add_gaussian(rng, "mem/pos_table", (cfg.max_history, cfg.pos_dim))
        layers.init_gru(params, rng, "mem/key_gru", cfg.pos_dim + cfg.d, cfg.d)
        if cfg.share_memory_grus:
            pass  # value chain reuses the key chain parameters
        else:
            layers.init_gru(params, rng, "mem/val_gru", cfg.pos_dim + cfg.d, cfg.d)
    params.add_gaussian(rng, "mem/addr_w", (cfg.d, cfg.d))


def memory_param_names(cfg):
    names = ["mem/addr_w"]
    if not cfg.ablated("tar"):
        names.append("mem/pos_table")
        names += layers.gru_param_names("mem/key_gru")
        if not cfg.share_memory_grus:
            names += layers.gru_param_names("mem/val_gru")
    return names


def context_summary(params, cfg, context, enc_name="utt_enc", *, rng=None, train=False, trace=None):
    """Mean-pool each real utterance after the attention block, then take
    the elementwise max across utterances."""
    means = []
    for utt, real in zip(context.utterances, context.utterance_mask):
        if not real:
            continue
        rep = encoders.encode_utterance(params, cfg, utt, enc_name, rng=rng, train=train, trace=trace)
        means.append(encoders.mean_pool(rep))
    if not means:
        raise DataError("context summary requires at least one real utterance")
    if len(means) == 1:
        return means[0]
    return ad.tmax(ad.stack(means), axis=0)


def build_query(reps, utterance_mask):
    """Current-context query: word means per utterance, elementwise max."""
    means = [encoders.mean_pool(rep) for rep, real in zip(reps, utterance_mask) if real and rep is not None]
    if not means:
        raise DataError("query requires at least one real utterance")
    h = means[0] if len(means) == 1 else ad.tmax(ad.stack(means), axis=0)
    return QueryVector(h=h)


def encode_history(params, cfg, history, *, enc_name="utt_enc", cnn_name="cnn", rng=None, train=False, trace=None):
    """Encode history pairs into aligned key/value slots.

    Keys are encoded history contexts, values are encoded history stickers;
    both run through position-aware GRU chains oldest to newest unless the
    'tar' ablation bypasses them. Padded slots are zero and masked out.
    """
    positions = [h.position_index for h in history]
    if positions != list(range(1, len(history) + 1)):
        raise DataError(f"history positions must be 1..n in order, got {positions}")
    if len(history) > cfg.max_history:
        raise DataError(f"history has {len(history)} pairs, limit is {cfg.max_history}")

    dtype = params.dtype
    zero_row = ad.constant(np.zeros(cfg.d, dtype=dtype))
    key_rows, value_rows = [], []
    use_chain = not cfg.ablated("tar")
    key_state = zero_row
    value_state = zero_row
    val_gru = "mem/key_gru" if cfg.share_memory_grus else "mem/val_gru"
    for pair in history:
        summary = context_summary(params, cfg, pair.context, enc_name, rng=rng, train=train, trace=trace)
        flat = encoders.encode_sticker(params, cfg, pair.sticker_image, cnn_name).flat
        if use_chain:
            t = ad.embedding(params["mem/pos_table"], np.array([pair.position_index - 1])).reshape(cfg.pos_dim)
            key_state = layers.gru_cell(params, "mem/key_gru", ad.concat([t, summary]), key_state)
            value_state = layers.gru_cell(params, val_gru, ad.concat([t, flat]), value_state)
            key_rows.append(key_state)
            value_rows.append(value_state)
        else:
            key_rows.append(summary)
            value_rows.append(flat)

    slot_mask = np.zeros(cfg.max_history, dtype=bool)
    slot_mask[: len(history)] = True
    pad = [zero_row] * (cfg.max_history - len(history))
    if key_rows or pad:
        keys = ad.stack(key_rows + pad)
        values = ad.stack(value_rows + pad)
    else:
        keys = ad.constant(np.zeros((cfg.max_history, cfg.d), dtype=dtype))
        values = ad.constant(np.zeros((cfg.max_history, cfg.d), dtype=dtype))
    return PreferenceMemory(keys=keys, values=values, slot_mask=slot_mask)


def memory_read(params, cfg, query, mem, trace=None):
    """Bilinear addressing over unmasked slots, then a weighted value sum.

    Empty memory is a defined state: returns a zero vector and False.
    """
    if mem.empty:
        return ad.constant(np.zeros(cfg.d, dtype=params.dtype)), False
    scores = ad.matmul(mem.keys, ad.matmul(query.h, params["mem/addr_w"]))  # (T_h,)
    delta = ad.masked_softmax(scores, mem.slot_mask)
    if trace is not None:
        trace.slot_weights = delta.data.copy()
    return ad.matmul(delta, mem.values), True


def average_read(cfg, mem, dtype):
    """Unweighted mean of the unmasked value slots."""
    if mem.empty:
        return ad.constant(np.zeros(cfg.d, dtype=dtype)), False
    weights = mem.slot_mask.astype(dtype)
    weights = weights / weights.sum()
    return ad.matmul(ad.constant(weights), mem.values), True


def weighted_read(params, cfg, query, mem, trace=None):
    """Attention straight over the value slots (no key addressing)."""
    if mem.empty:
        return ad.constant(np.zeros(cfg.d, dtype=params.dtype)), False
    scores = ad.matmul(mem.values, ad.matmul(query.h, params["mem/addr_w"]))
    delta = ad.masked_softmax(scores, mem.slot_mask)
    if trace is not None:
        trace.slot_weights = delta.data.copy()
    return ad.matmul(delta, mem.values), True


def preference_read(params, cfg, variant, query, mem, trace=None):
    if variant == "full":
        return memory_read(params, cfg, query, mem, trace)
    if variant == "average":
        return average_read(cfg, mem, params.dtype)
    if variant == "weighted":
        return weighted_read(params, cfg, query, mem, trace)
    raise ValueError(f"variant '{variant}' is not a differentiable memory read")


def most_selected_sticker(history):
    """Modal history sticker by image identity; ties break toward the most
    recently used. Returns None on empty history (the abstain signal)."""
    if not history:
        return None
    counts = {}
    last_use = {}
    arrays = {}
    for i, pair in enumerate(history):
        key = pair.sticker_image.tobytes()
        counts[key] = counts.get(key, 0) + 1
        last_use[key] = i
        arrays[key] = pair.sticker_image
    best = max(counts, key=lambda k: (counts[k], last_use[k]))
    return arrays[best]
