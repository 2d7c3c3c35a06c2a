"""Rank-based AUROC and step-curve AUPRC with tie handling."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .core_types import ValidationError


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValidationError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be binary 0/1")
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ValidationError("both classes must be present")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied pairs count one half."""
    scores, labels = _check(scores, labels)
    ranks = rankdata(scores)  # average ranks for ties
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Area under the precision-recall step curve, sweeping distinct thresholds downward."""
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    recall = tp / labels.sum()
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))
