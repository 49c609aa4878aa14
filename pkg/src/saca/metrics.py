"""Evaluation metrics with NaN-label masking."""

import numpy as np

from .errors import SingleClassError


def _average_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_1d(scores, labels):
    """Mann-Whitney U / (n_pos * n_neg) for one task; NaN labels are dropped."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    keep = ~np.isnan(labels)
    scores, labels = scores[keep], labels[keep] > 0.5
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("ROC-AUC needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels):
    """Macro-averaged ROC-AUC over task columns.

    Columns lacking one of the two classes are skipped; if no column is
    usable a :class:`SingleClassError` is raised.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        return roc_auc_1d(scores, labels)
    values = []
    for t in range(scores.shape[1]):
        try:
            values.append(roc_auc_1d(scores[:, t], labels[:, t]))
        except SingleClassError:
            continue
    if not values:
        raise SingleClassError("no task has both classes present")
    return float(np.mean(values))


def _masked_errors(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    keep = ~np.isnan(target)
    if not keep.any():
        raise ValueError("no labelled entries")
    return (pred - np.where(keep, target, 0.0))[keep]


def rmse(pred, target):
    err = _masked_errors(pred, target)
    return float(np.sqrt(np.mean(err * err)))


def mae(pred, target):
    return float(np.mean(np.abs(_masked_errors(pred, target))))
