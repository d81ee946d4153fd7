"""AUC via the Mann-Whitney U statistic."""

from __future__ import annotations

import logging

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """AUC needs both classes present."""


def auc_binary(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: only one class present")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro_ovr(class_scores, labels) -> float:
    """Unweighted mean of one-vs-rest AUCs over the classes present in ``labels``."""
    probs = np.asarray(class_scores, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError("class_scores must be (num_samples, num_classes)")
    present = [c for c in range(probs.shape[1]) if np.any(labels == c)]
    missing = sorted(set(range(probs.shape[1])) - set(present))
    if missing:
        log.warning("classes %s absent from labels; skipped in macro AUC", missing)
    if len(present) < 2:
        raise UndefinedMetricError("macro AUC needs at least two classes present")
    return float(np.mean([auc_binary(probs[:, c], (labels == c).astype(int)) for c in present]))
