"""Ranking metrics, SSIM similarity analysis, sweep experiments, and
report/attention-dump emission."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .errors import ConfigError, DataError, ShapeError
from .memory import most_selected_sticker
from .tracing import ForwardTrace

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601


# -- ranking metrics ----------------------------------------------------------


def rank_of_truth(scores, truth_index):
    """1-based rank under descending score; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not (0 <= truth_index < len(scores)):
        raise DataError(f"truth index {truth_index} out of range for {len(scores)} scores")
    t = scores[truth_index]
    better = int((scores > t).sum())
    tied_before = int((scores[:truth_index] == t).sum())
    return 1 + better + tied_before


def average_precision(scores, truth_index):
    """With a single relevant item, AP reduces to 1/rank."""
    return 1.0 / rank_of_truth(scores, truth_index)


def recall_at_k(scores, truth_index, k):
    if not (1 <= k <= len(scores)):
        raise DataError(f"k={k} out of range for {len(scores)} candidates")
    return 1 if rank_of_truth(scores, truth_index) <= k else 0


# -- SSIM -----------------------------------------------------------------------


def to_gray(image):
    """(H, W, C) float image to 2-D luma plane."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[2] == 1:
        return image[:, :, 0]
    r, g, b = LUMA_WEIGHTS
    return r * image[:, :, 0] + g * image[:, :, 1] + b * image[:, :, 2]


def _gaussian_kernel(size, sigma):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(plane, kernel):
    """Separable valid-mode 2-D correlation with a 1-D kernel."""
    w = len(kernel)
    rows = np.lib.stride_tricks.sliding_window_view(plane, w, axis=0) @ kernel
    return np.lib.stride_tricks.sliding_window_view(rows, w, axis=1) @ kernel


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Structural similarity with a gaussian window, averaged over the
    valid region. Inputs are grayscale-converted first."""
    ga, gb = to_gray(a), to_gray(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"ssim: image shapes differ, {ga.shape} vs {gb.shape}")
    if min(ga.shape) < window:
        raise ShapeError(f"ssim: image smaller than the {window}x{window} window")
    kernel = _gaussian_kernel(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    mu_a = _filter_valid(ga, kernel)
    mu_b = _filter_valid(gb, kernel)
    ea2 = _filter_valid(ga * ga, kernel)
    eb2 = _filter_valid(gb * gb, kernel)
    eab = _filter_valid(ga * gb, kernel)
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def candidate_similarity(sample):
    """Mean SSIM between the truth sticker and each negative."""
    truth = sample.candidates[sample.truth_index]
    sims = [ssim(truth, c) for i, c in enumerate(sample.candidates) if i != sample.truth_index]
    return float(np.mean(sims))


# -- scorers ----------------------------------------------------------------------


def model_scorer(model):
    def score(sample):
        return model.scores_array(sample)

    return score


def most_selected_scorer(sample):
    """Heuristic: rank candidates matching the user's modal history sticker
    first. Returns None (abstain, scored rank-last) on empty history."""
    modal = most_selected_sticker(sample.history)
    if modal is None:
        return None
    modal_bytes = modal.tobytes()
    return np.array([1.0 if c.tobytes() == modal_bytes else 0.0 for c in sample.candidates])


# -- evaluation --------------------------------------------------------------------


RECALL_KS = (1, 2, 5)


@dataclass
class EvalReport:
    map: float
    recall_at: dict
    n_samples: int
    bucket_table: list | None = None
    history_sweep: list | None = None
    utterance_sweep: list | None = None

    def to_dict(self):
        doc = {
            "map": self.map,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "n_samples": self.n_samples,
        }
        if self.bucket_table is not None:
            doc["bucket_table"] = self.bucket_table
        if self.history_sweep is not None:
            doc["history_sweep"] = self.history_sweep
        if self.utterance_sweep is not None:
            doc["utterance_sweep"] = self.utterance_sweep
        return doc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def score_all(scorer, samples, threads=1):
    """Score every sample; abstentions become None. Order follows input."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(scorer, samples))
    return [scorer(s) for s in samples]


def _metric_rows(samples, score_rows):
    ap, recalls = [], {k: [] for k in RECALL_KS}
    for sample, scores in zip(samples, score_rows):
        if scores is None:  # abstain: truth forced to the last rank
            rank = len(sample.candidates)
        else:
            rank = rank_of_truth(scores, sample.truth_index)
        ap.append(1.0 / rank)
        for k in RECALL_KS:
            recalls[k].append(1 if rank <= k else 0)
    return ap, recalls


def evaluate(scorer, samples, threads=1):
    """Deterministic full-pass MAP and R@k over the sample list."""
    if not samples:
        raise DataError("evaluate: empty dataset")
    if callable(getattr(scorer, "scores_array", None)):
        scorer = model_scorer(scorer)
    rows = score_all(scorer, samples, threads)
    ap, recalls = _metric_rows(samples, rows)
    return EvalReport(
        map=float(np.mean(ap)),
        recall_at={k: float(np.mean(v)) for k, v in recalls.items()},
        n_samples=len(samples),
    ), rows


def assign_buckets(values, n_buckets=5):
    """Equal-width bins over the observed [min, max] range."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(len(values), dtype=int), [(lo, hi)]
    edges = np.linspace(lo, hi, n_buckets + 1)
    idx = np.minimum(np.searchsorted(edges, values, side="right") - 1, n_buckets - 1)
    return idx, [(float(edges[i]), float(edges[i + 1])) for i in range(n_buckets)]


def similarity_report(samples, score_rows, n_buckets=5):
    """Bucket samples by mean truth-vs-negative SSIM; R@1 per bucket.

    Empty buckets are omitted rather than reported as zero.
    """
    sims = [candidate_similarity(s) for s in samples]
    idx, spans = assign_buckets(sims, n_buckets)
    table = []
    for b, (lo, hi) in enumerate(spans):
        members = [i for i in range(len(samples)) if idx[i] == b]
        if not members:
            continue
        hits = []
        for i in members:
            if score_rows[i] is None:
                hits.append(0)
            else:
                hits.append(recall_at_k(score_rows[i], samples[i].truth_index, 1))
        table.append({
            "bucket": b, "low": lo, "high": hi, "n": len(members),
            "mean_similarity": float(np.mean([sims[i] for i in members])),
            "recall_at_1": float(np.mean(hits)),
        })
    return {"mean_similarity": float(np.mean(sims)), "buckets": table}


def utterance_sweep(scorer, samples, max_n=18, min_n=3, threads=1):
    """Re-mask contexts to their last n utterances and re-evaluate."""
    if callable(getattr(scorer, "scores_array", None)):
        scorer = model_scorer(scorer)
    limit = min(max_n, max(s.context.n_real for s in samples))
    rows = []
    for n in range(min_n, limit + 1):
        cut = [data_mod.limit_utterances(s, n) for s in samples]
        report, _ = evaluate(scorer, cut, threads)
        rows.append({"x": n, "map": report.map, **{f"recall_at_{k}": report.recall_at[k] for k in RECALL_KS}})
    return rows


def history_sweep(scorer, samples, threads=1):
    """Re-mask histories to their most recent n pairs and re-evaluate."""
    if callable(getattr(scorer, "scores_array", None)):
        scorer = model_scorer(scorer)
    limit = max(len(s.history) for s in samples)
    rows = []
    for n in range(0, limit + 1):
        cut = [data_mod.limit_history(s, n) for s in samples]
        report, _ = evaluate(scorer, cut, threads)
        rows.append({"x": n, "map": report.map, **{f"recall_at_{k}": report.recall_at[k] for k in RECALL_KS}})
    return rows


# -- attention dumps -----------------------------------------------------------------


def attention_records(model, samples):
    """One dump record per sample: per-candidate attention grids and
    vectors, memory slot weights, gates, and scores."""
    if model.cfg.ablated("din"):
        raise ConfigError("attention dumps need the interaction module (din ablated)")
    p = model.cfg.p
    records = []
    for sample in samples:
        trace = ForwardTrace()
        with ad.no_grad():
            breakdowns = model.score_sample(sample, train=False, trace=trace)
        cands = []
        for ci, (cand, b) in enumerate(zip(trace.candidates, breakdowns)):
            patch = [np.asarray(g).reshape(p, p).tolist() for g in cand["patch_attention"]]
            words = [np.asarray(w).tolist() for w in cand["word_attention"]]
            cands.append({
                "candidate": ci,
                "path": sample.candidate_paths[ci] if ci < len(sample.candidate_paths) else None,
                "patch_attention": patch,  # per real utterance, p x p
                "word_attention": words,  # per real utterance, T_x
                "gate": cand.get("gate"),
                "score": cand.get("score"),
            })
        records.append({
            "sid": sample.sid,
            "truth_index": sample.truth_index,
            "slot_weights": None if trace.slot_weights is None else trace.slot_weights.tolist(),
            "candidates": cands,
        })
    return records


def write_attention_dump(records, path):
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")


def read_attention_dump(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
