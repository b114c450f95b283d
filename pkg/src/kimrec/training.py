"""Negative sampling, the softmax-NCE loss and the training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .evaluation import MetricsReport, evaluate
from .ingest import ImpressionRecord, NewsTable, UserHistory
from .matcher import KIM, history_rows, score_grid
from .numerics import AdamState, NonFiniteError, adam_step, save_checkpoint

log = logging.getLogger(__name__)

LOG_HEADER = "epoch\tloss\tauc\tmrr\tndcg5\tndcg10\n"


@dataclass
class TrainingSample:
    user: UserHistory
    positive: str
    negatives: list[str]


def build_training_samples(impressions: list[ImpressionRecord], U: int = 4, seed: int = 0):
    """One sample per positive, with ``U`` negatives from the same impression.

    Returns ``(samples, skipped)`` where ``skipped`` counts impressions that
    had no negative to draw from.
    """
    if U < 1:
        raise ValueError("U must be >= 1")
    rng = np.random.default_rng(seed)
    samples, skipped = [], 0
    for imp in impressions:
        negs = [n for n, lab in imp.candidates if lab == 0]
        pos = [n for n, lab in imp.candidates if lab == 1]
        if not negs:
            skipped += 1
            continue
        for p in pos:
            if len(negs) >= U:
                pick = [negs[i] for i in rng.choice(len(negs), size=U, replace=False)]
            else:
                pick = [negs[i] for i in rng.choice(len(negs), size=U, replace=True)]
            samples.append(TrainingSample(imp.user, p, pick))
    return samples, skipped


def nce_loss(z_pos: torch.Tensor, z_neg: torch.Tensor) -> torch.Tensor:
    """``-log softmax`` of the positive among ``[z_pos, z_neg...]``, averaged over the batch.

    ``z_pos`` is ``[S]`` (or scalar), ``z_neg`` ``[S, U]`` (or ``[U]``).
    """
    z_pos = torch.as_tensor(z_pos)
    z_neg = torch.as_tensor(z_neg)
    logits = torch.cat([z_pos.unsqueeze(-1), z_neg], dim=-1)
    per = torch.logsumexp(logits, dim=-1) - z_pos
    return per.mean()


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    val: list[MetricsReport] = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = float("-inf")
    skipped_impressions: int = 0
    seconds: float = 0.0
    log_rows: list[str] = field(default_factory=list)


def sample_batch_tensors(news: NewsTable, batch: list[TrainingSample]):
    h, m = history_rows(news, [s.user for s in batch])
    c = torch.as_tensor(np.stack([news.lookup([s.positive] + s.negatives) for s in batch]))
    return h, m, c


def train(
    model: KIM,
    news: NewsTable,
    train_impressions: list[ImpressionRecord],
    val_impressions: list[ImpressionRecord] | None = None,
    *,
    negatives: int = 4,
    lr: float = 5e-5,
    batch_size: int = 16,
    epochs: int = 20,
    patience: int = 3,
    seed: int = 0,
    adam: AdamState | None = None,
    log_path=None,
    checkpoint_path=None,
    eval_news: NewsTable | None = None,
    on_epoch=None,
) -> TrainReport:
    """Train in place. Validation (if given) runs after each epoch and the best
    AUC model is checkpointed; training stops after ``patience`` epochs without
    improvement. ``on_epoch(epoch, report)`` may return True to stop early.
    """
    adam = adam or AdamState(lr=lr)
    report = TrainReport()
    t0 = time.perf_counter()
    samples, report.skipped_impressions = build_training_samples(train_impressions, negatives, seed)
    if not samples:
        raise ValueError("no training samples (every impression lacks a positive or a negative)")
    params = model.params
    stale = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if log_fh:
            log_fh.write(LOG_HEADER)
        for epoch in range(epochs):
            order = np.random.default_rng([seed, epoch]).permutation(len(samples))
            gen = torch.Generator().manual_seed(int(np.random.default_rng([seed, epoch, 1]).integers(2**62)))
            total, count = 0.0, 0
            for b, start in enumerate(range(0, len(order), batch_size)):
                batch = [samples[i] for i in order[start : start + batch_size]]
                h, m, c = sample_batch_tensors(news, batch)
                params.zero_grad()
                try:
                    z = score_grid(model, news, h, m, c, training=True, gen=gen)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"epoch {epoch} batch {b}: {exc}") from exc
                loss = nce_loss(z[:, 0], z[:, 1:])
                if not math.isfinite(loss.item()):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {b}")
                loss.backward()
                adam_step(params, params.grads(), adam)
                total += loss.item() * len(batch)
                count += len(batch)
            epoch_loss = total / count
            report.losses.append(epoch_loss)
            row = f"{epoch}\t{epoch_loss:.6f}"
            if val_impressions:
                metrics = evaluate(model, eval_news or news, val_impressions)
                report.val.append(metrics)
                row += "\t" + metrics.row()
                if metrics.auc > report.best_auc:
                    report.best_auc, report.best_epoch, stale = metrics.auc, epoch, 0
                    if checkpoint_path:
                        save_checkpoint(checkpoint_path, params, {"epoch": epoch, "val_auc": metrics.auc})
                else:
                    stale += 1
            else:
                row += "\t" + "\t".join(["nan"] * 4)
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, params, {"epoch": epoch})
            report.log_rows.append(row)
            if log_fh:
                log_fh.write(row + "\n")
                log_fh.flush()
            log.info("epoch %d: %s", epoch, row)
            if on_epoch and on_epoch(epoch, report):
                break
            if val_impressions and stale >= patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    report.seconds = time.perf_counter() - t0
    return report
