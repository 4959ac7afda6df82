"""Losses, the Adam optimizer, and the training loop with metrics logging."""

from __future__ import annotations

import json
import math
import os
import time

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericError
from .model import StickerRanker


def hinge_loss(scores, truth_index, margin):
    """Sum over negatives of max(0, score_neg - score_pos + margin).

    ``scores`` is a (T_c,) tensor with exactly one positive at truth_index.
    """
    n = scores.shape[0]
    if not (0 <= truth_index < n):
        raise DataError(f"truth index {truth_index} out of range for {n} candidates")
    pos = scores[truth_index : truth_index + 1]  # (1,)
    margin_c = ad.constant(np.asarray(margin, dtype=scores.data.dtype))
    hinged = ad.relu(scores - pos + margin_c)
    keep = np.ones(n, dtype=scores.data.dtype)
    keep[truth_index] = 0.0
    return ad.tsum(ad.mul(hinged, ad.constant(keep)))


def emoji_loss(logits, label):
    """Cross entropy: negative log softmax probability of the label."""
    n = logits.shape[0]
    if not (0 <= label < n):
        raise DataError(f"emoji label {label} out of range for {n} classes")
    probs = ad.masked_softmax(logits, np.ones(n, dtype=bool))
    return ad.neg(ad.tsum(ad.log(probs[label : label + 1])))


def sample_loss(model, sample, train_cfg, *, rng=None, train=True):
    """Hinge + emoji loss for one sample. Returns (loss tensor, parts dict)."""
    cfg = model.cfg
    classify = not cfg.ablated("classify") and cfg.n_emoji is not None and sample.emoji_labels is not None
    breakdowns = model.score_sample(sample, train=train, rng=rng, want_emoji=classify)
    scores = ad.concat([b.y for b in breakdowns])
    loss = hinge_loss(scores, sample.truth_index, train_cfg.margin)
    parts = {"hinge": float(loss.data)}
    if classify:
        ce_terms = [emoji_loss(b.emoji_logits, label) for b, label in zip(breakdowns, sample.emoji_labels)]
        ce = ad.concat([t.reshape(1) for t in ce_terms])
        ce_mean = ad.tmean(ce)
        parts["emoji"] = float(ce_mean.data)
        lam = ad.constant(np.asarray(train_cfg.lambda_cls, dtype=model.dtype))
        loss = loss + ad.mul(lam, ce_mean)
    else:
        parts["emoji"] = 0.0
    parts["total"] = float(loss.data)
    return loss, parts


class Adam:
    """Adaptive-moment gradient descent over a ParamSet."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, params):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, tensor in sorted(params.items()):
            g = tensor.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def global_grad_norm(params):
    total = 0.0
    for _name, tensor in params.items():
        if tensor.grad is not None:
            total += float((tensor.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    norm = global_grad_norm(params)
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for _name, tensor in params.items():
            if tensor.grad is not None:
                tensor.grad *= scale
    return norm


def train_step(model, batch, optimizer, train_cfg, *, rng=None):
    """One gradient step over a batch of samples (mean loss)."""
    model.params.zero_grad()
    losses = []
    parts_acc = {"hinge": 0.0, "emoji": 0.0, "total": 0.0}
    for sample in batch:
        loss, parts = sample_loss(model, sample, train_cfg, rng=rng, train=True)
        if not math.isfinite(parts["total"]):
            raise NumericError(f"non-finite loss on sample {sample.sid}")
        losses.append(loss)
        for k in parts_acc:
            parts_acc[k] += parts[k] / len(batch)
    total = ad.tmean(ad.concat([l.reshape(1) for l in losses]))
    total.backward()
    grad_norm = clip_gradients(model.params, train_cfg.grad_clip)
    optimizer.step(model.params)
    return {"grad_norm": grad_norm, **parts_acc}


def train_recall1(model, samples):
    """Fraction of samples whose truth ranks first (ties by lower index)."""
    from .evaluation import rank_of_truth

    hits = 0
    for s in samples:
        hits += int(rank_of_truth(model.scores_array(s), s.truth_index) == 1)
    return hits / len(samples)


def train(model, samples, train_cfg, out_dir=None, log=None):
    """Full training loop. Writes metrics.jsonl and checkpoint.json when
    ``out_dir`` is given; returns the list of metric records."""
    if not samples:
        raise DataError("training requires at least one sample")
    seq = np.random.SeedSequence(train_cfg.seed)
    shuffle_ss, dropout_ss = seq.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    optimizer = Adam(model.params, train_cfg.lr, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)

    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    metrics_file = open(metrics_path, "w") if metrics_path else None
    records = []

    def emit(record):
        records.append(record)
        if metrics_file:
            metrics_file.write(json.dumps(record) + "\n")
            metrics_file.flush()
        if log:
            log(record)

    try:
        step = 0
        start = time.perf_counter()
        for epoch in range(1, train_cfg.max_epochs + 1):
            order = shuffle_rng.permutation(len(samples))
            for lo in range(0, len(samples), train_cfg.batch_size):
                batch = [samples[i] for i in order[lo : lo + train_cfg.batch_size]]
                step += 1
                stats = train_step(model, batch, optimizer, train_cfg, rng=dropout_rng)
                emit({
                    "kind": "step", "epoch": epoch, "step": step,
                    "hinge": stats["hinge"], "emoji": stats["emoji"], "total": stats["total"],
                    "grad_norm": stats["grad_norm"],
                    "wall_time": time.perf_counter() - start,
                })
            if train_cfg.eval_every and epoch % train_cfg.eval_every == 0:
                r1 = train_recall1(model, samples)
                emit({"kind": "probe", "epoch": epoch, "step": step, "train_recall1": r1,
                      "wall_time": time.perf_counter() - start})
                if train_cfg.target_recall1 is not None and r1 >= train_cfg.target_recall1:
                    emit({"kind": "stop", "epoch": epoch, "step": step, "reason": "target_recall1 reached",
                          "wall_time": time.perf_counter() - start})
                    break
            if out_dir and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
                model.params.save(os.path.join(out_dir, f"checkpoint_epoch{epoch}.json"))
        if out_dir:
            model.params.save(os.path.join(out_dir, "checkpoint.json"))
    finally:
        if metrics_file:
            metrics_file.close()
    return records


def strip_timing(records):
    """Metrics records without the wall_time field (the only
    run-dependent value; everything else is seed-deterministic)."""
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]
