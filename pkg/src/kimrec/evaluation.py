"""Impression-level ranking metrics: AUC, MRR, nDCG@5, nDCG@10."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.stats import rankdata


class SkipImpression(Exception):
    """The impression cannot be scored by this metric (no positive, or no negative)."""


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d arrays of equal length")
    return scores, labels


def auc_single(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered correctly; ties count half."""
    scores, labels = _check(scores, labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise SkipImpression("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _ranked_labels(scores, labels):
    order = np.argsort(-scores, kind="stable")
    return labels[order]


def mrr_single(scores, labels) -> float:
    """Mean reciprocal rank of the positives (stable sort breaks ties by index)."""
    scores, labels = _check(scores, labels)
    if not (labels == 1).any():
        raise SkipImpression("MRR needs a positive")
    ranked = _ranked_labels(scores, labels)
    rr = ranked / np.arange(1, len(ranked) + 1)
    return float(rr.sum() / ranked.sum())


def ndcg_at_k(scores, labels, k: int) -> float:
    scores, labels = _check(scores, labels)
    if not (labels == 1).any():
        raise SkipImpression("nDCG needs a positive")
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    ranked = _ranked_labels(scores, labels)[:k]
    ideal = np.sort(labels)[::-1][:k]
    return float((ranked * disc[: len(ranked)]).sum() / (ideal * disc[: len(ideal)]).sum())


@dataclass
class MetricsReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    scored: int
    skipped: int

    def row(self) -> str:
        return "\t".join(f"{v:.6f}" for v in (self.auc, self.mrr, self.ndcg5, self.ndcg10))

    def block(self) -> str:
        return "".join(f"{k} = {v:.6f}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def parse_block(cls, text: str) -> "MetricsReport":
        vals = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = v
        return cls(
            float(vals["auc"]), float(vals["mrr"]), float(vals["ndcg5"]), float(vals["ndcg10"]),
            int(vals["scored"]), int(vals["skipped"]),
        )


def metrics_from_scores(score_lists, label_lists) -> MetricsReport:
    """Macro-average over impressions with both a positive and a negative."""
    per = []
    skipped = 0
    for s, y in zip(score_lists, label_lists):
        y = np.asarray(y)
        if not ((y == 1).any() and (y == 0).any()):
            skipped += 1
            continue
        per.append((auc_single(s, y), mrr_single(s, y), ndcg_at_k(s, y, 5), ndcg_at_k(s, y, 10)))
    if not per:
        raise ValueError("no scorable impressions")
    arr = np.array(per)
    means = [math.fsum(arr[:, j]) / len(per) for j in range(4)]
    return MetricsReport(*means, scored=len(per), skipped=skipped)


def score_impressions(model, news, impressions, batch_size: int = 32, cache=None) -> list[np.ndarray]:
    """Scores for every impression, in candidate order (dropout off)."""
    from .matcher import history_rows, score_grid

    out: list[np.ndarray | None] = [None] * len(impressions)
    # group impressions of equal candidate count so they share one grid
    by_len: dict[int, list[int]] = {}
    for i, imp in enumerate(impressions):
        if not imp.candidates:
            raise ValueError(f"impression {imp.impression_id} has no candidates")
        by_len.setdefault(len(imp.candidates), []).append(i)
    with torch.no_grad():
        for n_c, idxs in sorted(by_len.items()):
            step = max(1, batch_size * 5 // max(n_c, 1))
            for start in range(0, len(idxs), step):
                chunk = idxs[start : start + step]
                users = [impressions[i].user for i in chunk]
                h, m = history_rows(news, users)
                c = torch.as_tensor(np.stack([news.lookup(impressions[i].candidate_ids) for i in chunk]))
                z = score_grid(model, news, h, m, c, cache=cache)
                for k, i in enumerate(chunk):
                    out[i] = z[k].double().numpy()
    return out


def evaluate(model, news, impressions, cache=None, batch_size: int = 32) -> MetricsReport:
    scores = score_impressions(model, news, impressions, batch_size, cache)
    return metrics_from_scores(scores, [imp.labels for imp in impressions])
