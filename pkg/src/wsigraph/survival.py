"""Horizon labels and the Cox negative log partial likelihood."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, UndefinedMetricError, ValidationError
from .records import PatientRecord

DEFAULT_HORIZON_MONTHS = 12.0


class SurvivalLabel(enum.Enum):
    EVENT_WITHIN_HORIZON = "event_within_horizon"
    SURVIVED_HORIZON = "survived_horizon"
    EXCLUDED_CENSORED = "excluded_censored"


def derive_binary_label(record: PatientRecord, horizon_months: float) -> SurvivalLabel:
    """Classify a patient relative to a fixed follow-up horizon.

    Patients censored before the horizon carry no information about
    whether they passed it and are marked for exclusion.
    """
    if not horizon_months > 0:
        raise ValidationError(f"horizon must be positive, got {horizon_months!r}")
    if record.os_time_months > horizon_months:
        return SurvivalLabel.SURVIVED_HORIZON
    if record.os_event == 1:
        return SurvivalLabel.EVENT_WITHIN_HORIZON
    return SurvivalLabel.EXCLUDED_CENSORED


@dataclass
class CohortRisks:
    risk: np.ndarray
    time: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        self.risk = np.asarray(self.risk, dtype=np.float64).reshape(-1)
        self.time = np.asarray(self.time, dtype=np.float64).reshape(-1)
        self.event = np.asarray(self.event).reshape(-1).astype(np.int64)
        n = len(self.risk)
        if len(self.time) != n or len(self.event) != n:
            raise ValidationError("risk, time and event must have equal lengths")
        if np.any(self.time < 0) or not np.all(np.isfinite(self.time)):
            raise ValidationError("times must be finite and nonnegative")
        if np.any((self.event != 0) & (self.event != 1)):
            raise ValidationError("events must be 0 or 1")

    def __len__(self):
        return len(self.risk)


def _risk_set_lse(cohort: CohortRisks):
    """log sum_{j: t_j >= t_i} exp(r_j) for every i (ties share a risk set)."""
    if not np.any(cohort.event == 1):
        raise UndefinedMetricError("Cox loss is undefined without observed events")
    if not np.all(np.isfinite(cohort.risk)):
        raise NumericError("non-finite risk score")
    order = np.argsort(-cohort.time, kind="stable")
    t_desc = cohort.time[order]
    running = np.logaddexp.accumulate(cohort.risk[order])
    # last position of each tie group in descending order
    neg = -t_desc
    last = np.searchsorted(neg, neg, side="right") - 1
    lse = np.empty_like(running)
    lse[order] = running[last]
    return lse


def cox_loss(cohort: CohortRisks) -> float:
    """Negative log partial likelihood, Breslow handling of ties."""
    lse = _risk_set_lse(cohort)
    ev = cohort.event == 1
    return float(-np.sum(cohort.risk[ev] - lse[ev]))


def cox_loss_grad(cohort: CohortRisks) -> np.ndarray:
    """d loss / d risk_k = -event_k + sum over events i with t_i <= t_k of
    exp(r_k) / sum_{t_j >= t_i} exp(r_j)."""
    lse = _risk_set_lse(cohort)
    ev = cohort.event == 1
    t_ev = cohort.time[ev]
    order = np.argsort(t_ev, kind="stable")
    t_sorted = t_ev[order]
    # log of the cumulative sum of 1/S_i over events with time <= t
    cum = np.logaddexp.accumulate(-lse[ev][order])
    k = np.searchsorted(t_sorted, cohort.time, side="right") - 1
    grad = -cohort.event.astype(np.float64)
    has = k >= 0
    grad[has] += np.exp(cohort.risk[has] + cum[k[has]])
    return grad
