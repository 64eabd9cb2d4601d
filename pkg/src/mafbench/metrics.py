"""ROC AUC as the Mann-Whitney statistic."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    """AUC requested for a label vector holding a single class."""


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count half.

    Computed from midranks in O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape[0]} scores for {y.shape[0]} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # midranks: 1-based average position of every tie block
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_s)) + 1]
    ends = np.r_[starts[1:], sorted_s.shape[0]]
    block_rank = (starts + ends + 1) / 2.0
    ranks = np.empty_like(sorted_s)
    ranks[order] = np.repeat(block_rank, ends - starts)
    # U = rank sum of positives minus its minimum; doubled to stay in integers
    u2 = 2.0 * ranks[y == 1].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) pair-counting reference."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    diff = pos[:, None] - neg[None, :]
    wins = 2 * int((diff > 0).sum()) + int((diff == 0).sum())
    return wins / (2.0 * pos.size * neg.size)
