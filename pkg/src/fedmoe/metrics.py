"""Evaluation: pairwise AUC with strict-inequality ties, per-client reports.

AUC here is the fraction of (positive, negative) score pairs with the
positive strictly above the negative. Ties earn no credit, so an all-ties
score list has AUC 0. This is deliberate; the usual convention of half
credit for ties is not used.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import RecordSet
from .diffcore import no_grad
from .diffcore.ops import PROB_CLAMP

__all__ = [
    "UndefinedAUCError",
    "EvalReport",
    "auc_bruteforce",
    "auc_fast",
    "evaluate_client",
    "mean_bce",
]


class UndefinedAUCError(ValueError):
    """AUC needs at least one positive and one negative sample."""


def _check_inputs(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels length differ: {scores.shape} vs {labels.shape}")
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise ValueError("labels must be 0 or 1")
    pos = scores[labels == 1.0]
    neg = scores[labels == 0.0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("AUC undefined: test data contains a single class")
    return pos, neg


def auc_bruteforce(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Exact double loop over all positive-negative pairs (oracle)."""
    pos, neg = _check_inputs(np.asarray(scores), np.asarray(labels))
    wins = 0
    for p in pos.tolist():
        for n in neg.tolist():
            if p > n:
                wins += 1
    return wins / (pos.size * neg.size)


def auc_fast(scores: Sequence[float], labels: Sequence[float]) -> float:
    """Sort-and-count equivalent of auc_bruteforce: same integer pair count."""
    pos, neg = _check_inputs(np.asarray(scores), np.asarray(labels))
    neg_sorted = np.sort(neg)
    # searchsorted(..., 'left') counts negatives strictly below each positive
    wins = int(np.searchsorted(neg_sorted, pos, side="left").sum())
    return wins / (pos.size * neg.size)


def mean_bce(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with the same clamping as the training loss."""
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


@dataclass(frozen=True)
class EvalReport:
    round_index: int
    client: int
    auc: tuple[float, ...]  # per task
    bce: tuple[float, ...]  # per task
    n_samples: int


def evaluate_client(model, records: RecordSet, round_index: int = 0, chunk: int = 4096) -> EvalReport:
    """Score a test partition in eval mode; pure (no parameter or BN mutation)."""
    was_training = model.training
    model.eval()
    try:
        n = len(records)
        scores = np.empty((n, model.spec.n_tasks))
        with no_grad():
            for start in range(0, n, chunk):
                x = records.features[start : start + chunk]
                preds = model.forward(x)
                for i, p in enumerate(preds):
                    scores[start : start + x.shape[0], i] = p.data.reshape(-1)
    finally:
        if was_training:
            model.train()
    aucs = tuple(auc_fast(scores[:, i], records.labels[:, i]) for i in range(model.spec.n_tasks))
    bces = tuple(mean_bce(scores[:, i], records.labels[:, i]) for i in range(model.spec.n_tasks))
    return EvalReport(round_index=round_index, client=model.spec.scenario, auc=aucs, bce=bces, n_samples=n)
