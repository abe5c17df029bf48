"""Threshold-free OOD detection metrics.

Convention everywhere: higher score = more In-D-like, and In-D is the positive
class unless stated otherwise. Values are fractions, not percentages.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError


def _as_scores(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValidationError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def passing_count(n: int, target_tpr: float) -> int:
    """Smallest number of samples out of ``n`` that reaches ``target_tpr``."""
    if not 0.0 < target_tpr <= 1.0:
        raise ValidationError("target_tpr must be in (0, 1]")
    return max(1, math.ceil(round(target_tpr * n, 9)))


def tpr_threshold(scores, target_tpr: float = 0.95) -> float:
    """Largest threshold t such that at least ``target_tpr`` of ``scores`` are >= t."""
    s = np.sort(_as_scores(scores, "scores"))[::-1]
    return float(s[passing_count(len(s), target_tpr) - 1])


def fpr_at_tpr(in_d_scores, ood_scores, target_tpr: float = 0.95) -> float:
    ind = _as_scores(in_d_scores, "in_d_scores")
    ood = _as_scores(ood_scores, "ood_scores")
    t = tpr_threshold(ind, target_tpr)
    return float(np.count_nonzero(ood >= t)) / len(ood)


def fpr_at_tpr95(in_d_scores, ood_scores) -> float:
    return fpr_at_tpr(in_d_scores, ood_scores, 0.95)


def auroc(in_d_scores, ood_scores) -> float:
    """P(in_d > ood) + 0.5 P(tie), via the Mann-Whitney rank statistic."""
    ind = _as_scores(in_d_scores, "in_d_scores")
    ood = _as_scores(ood_scores, "ood_scores")
    ranks = rankdata(np.concatenate([ind, ood]), method="average")
    n1, n2 = len(ind), len(ood)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


def aupr(scores_pos, scores_neg) -> float:
    """Step-wise area under the precision-recall curve with ``scores_pos`` positive.

    Thresholds run over the distinct scores in descending order; each recall
    increment is weighted by the precision reached at that threshold.
    """
    pos = _as_scores(scores_pos, "scores_pos")
    neg = _as_scores(scores_neg, "scores_neg")
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    order = np.argsort(-scores, kind="mergesort")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    fp = np.cumsum(~is_pos)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp, fp = tp[ends], fp[ends]
    d_tp = np.diff(np.r_[0, tp])
    terms = [(int(d) / len(pos)) * (int(t) / int(t + f)) for d, t, f in zip(d_tp, tp, fp) if d]
    return math.fsum(terms)


def aupr_in(in_d_scores, ood_scores) -> float:
    return aupr(in_d_scores, ood_scores)


def aupr_out(in_d_scores, ood_scores) -> float:
    return aupr(-_as_scores(ood_scores, "ood_scores"), -_as_scores(in_d_scores, "in_d_scores"))


def all_metrics(in_d_scores, ood_scores) -> dict:
    return {
        "fpr_at_tpr95": fpr_at_tpr95(in_d_scores, ood_scores),
        "auroc": auroc(in_d_scores, ood_scores),
        "aupr_in": aupr_in(in_d_scores, ood_scores),
        "aupr_out": aupr_out(in_d_scores, ood_scores),
    }
