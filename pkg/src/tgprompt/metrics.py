"""Ranking metrics for binary scored sets."""

from __future__ import annotations

import warnings

import numpy as np


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.size} vs {y.size})")
    if s.size == 0:
        raise ValueError("empty scored set")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve, ties forming one threshold."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        warnings.warn("average_precision: single-class input; returning the positive rate",
                      RuntimeWarning, stacklevel=2)
        return n_pos / y.size
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, s.size - 1)
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    starts = np.concatenate([[0], np.flatnonzero(np.diff(xs) != 0) + 1])
    ends = np.append(starts[1:], x.size)
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    return ranks


def auc_roc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + half the tie probability."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc needs both classes present")
    ranks = _average_ranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
