"""Harrell's concordance index and ROC/AUC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .survival import CohortRisks


@dataclass(frozen=True)
class ConcordanceResult:
    comparable_pairs: int
    concordant: int
    tied_risk: int
    c_index: float


def concordance_index(cohort: CohortRisks) -> ConcordanceResult:
    """Harrell's C over all usable pairs.

    A pair with ``t_i < t_j`` is usable only when patient ``i`` had an
    observed event; equal times are never usable.  Within a usable pair the
    earlier patient should carry the higher risk; equal risks score 1/2.
    """
    n = len(cohort)
    if n < 2:
        raise ValidationError("concordance needs at least two patients")
    t, r = cohort.time, cohort.risk
    comparable = (t[:, None] < t[None, :]) & (cohort.event[:, None] == 1)
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise UndefinedMetricError("no comparable pairs; C-index is undefined")
    concordant = int((comparable & (r[:, None] > r[None, :])).sum())
    tied = int((comparable & (r[:, None] == r[None, :])).sum())
    return ConcordanceResult(n_pairs, concordant, tied, (concordant + 0.5 * tied) / n_pairs)


@dataclass(frozen=True)
class RocCurve:
    thresholds: Tuple[float, ...]
    points: Tuple[Tuple[float, float], ...]   # (fpr, tpr)
    auc: float
    n_pos: int
    n_neg: int


def roc_points(scores, labels) -> RocCurve:
    """Sweep a threshold down through the distinct scores.

    Tied scores move the curve in one diagonal step.  The first point is
    (0, 0) at threshold +inf.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValidationError("scores and labels must have equal lengths")
    if np.any((y != 0) & (y != 1)):
        raise ValidationError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores must be finite")
    n_pos = int((y == 1).sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted == 1)
    fp = np.cumsum(y_sorted == 0)
    # keep the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    points: List[Tuple[float, float]] = list(zip(fpr.tolist(), tpr.tolist()))
    return RocCurve(tuple(thresholds.tolist()), tuple(points), auc, n_pos, n_neg)
