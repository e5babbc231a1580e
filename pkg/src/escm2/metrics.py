"""Ranking metrics for CTR/CVR/CTCVR scores and the CVR expectation bias."""
from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. a single class)."""


def _prepare(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size != y.size:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0/1")
    return s, y.astype(np.int64)


def _require_both_classes(y: np.ndarray) -> Tuple[int, int]:
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("need at least one positive and one negative label")
    return n_pos, n_neg


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (midranks for ties)."""
    s, y = _prepare(scores, labels)
    n_pos, n_neg = _require_both_classes(y)
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sweep(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) when predicting positive for ``score >= t``.

    Thresholds run over the distinct scores from high to low; the leading
    ``+inf`` threshold (nothing predicted positive) is included.
    """
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(s_sorted[1:] != s_sorted[:-1])[0], s_sorted.size - 1]
    thresholds = np.r_[np.inf, s_sorted[last]]
    return thresholds, np.r_[0, tp[last]], np.r_[0, fp[last]]


def ks(scores, labels) -> float:
    """Kolmogorov-Smirnov statistic: ``max |TPR - FPR|`` over thresholds."""
    s, y = _prepare(scores, labels)
    n_pos, n_neg = _require_both_classes(y)
    _, tp, fp = _sweep(s, y)
    return float(np.max(np.abs(tp / n_pos - fp / n_neg)))


def best_pr_f1_recall(scores, labels) -> Tuple[float, float]:
    """F1 and recall at the threshold that maximizes F1.

    Ties go to the lower threshold, i.e. the higher recall.
    """
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("no positive labels")
    _, tp, fp = _sweep(s, y)
    f1 = 2.0 * tp / (2.0 * tp + fp + (n_pos - tp))
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(f1[best]), float(tp[best] / n_pos)


def cvr_expectation_bias(cvr_predictions, reference: float) -> float:
    """Mean CVR prediction over the exposure space minus a reference rate."""
    p = np.asarray(cvr_predictions, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("no predictions")
    return float(p.mean() - reference)


def metric_suite(scores, labels) -> dict:
    """``{auc, ks, f1, recall}``; undefined entries are NaN."""
    out = {}
    for key, fn in (("auc", auc), ("ks", ks)):
        try:
            out[key] = fn(scores, labels)
        except UndefinedMetricError:
            out[key] = float("nan")
    try:
        out["f1"], out["recall"] = best_pr_f1_recall(scores, labels)
    except UndefinedMetricError:
        out["f1"] = out["recall"] = float("nan")
    return out
