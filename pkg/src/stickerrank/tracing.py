"""Lightweight capture of attention distributions during a forward pass.

Used for normalization checks and for attention dump reports; holds plain
numpy arrays only, never graph tensors.
"""

from __future__ import annotations

import numpy as np


class ForwardTrace:
    def __init__(self):
        self.attention = []  # (row-stochastic matrix, key mask) per softmax
        self.slot_weights = None  # memory read weights, (T_h,)
        self.candidates = []  # per-candidate dicts

    def add_attention(self, rows, key_mask):
        self.attention.append((np.asarray(rows), np.asarray(key_mask, dtype=bool)))

    def start_candidate(self):
        self.candidates.append({"word_attention": [], "patch_attention": []})
        return self.candidates[-1]
