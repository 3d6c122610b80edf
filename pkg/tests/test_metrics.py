import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_concordance, mann_whitney_auc
from wsigraph.errors import UndefinedMetricError, ValidationError
from wsigraph.metrics import concordance_index, roc_points
from wsigraph.survival import CohortRisks


def test_perfect_ranking():
    r = concordance_index(CohortRisks([3, 2, 1], [1, 2, 3], [1, 1, 1]))
    assert r.c_index == 1.0
    assert (r.comparable_pairs, r.concordant, r.tied_risk) == (3, 3, 0)


def test_censored_example():
    r = concordance_index(CohortRisks([0.8, 0.2, 0.15, 0.1], [1, 3, 2, 4], [1, 0, 1, 1]))
    assert (r.comparable_pairs, r.concordant, r.tied_risk) == (5, 4, 0)
    assert r.c_index == pytest.approx(0.8, abs=1e-15)


def test_all_ties_is_one_half():
    r = concordance_index(CohortRisks([0.3] * 5, [1, 2, 3, 4, 5], [1, 0, 1, 0, 1]))
    assert r.c_index == 0.5


def test_equal_times_not_comparable():
    r = concordance_index(CohortRisks([1.0, 0.0, 0.5], [2, 2, 3], [1, 1, 0]))
    assert r.comparable_pairs == 2


def test_concordance_errors():
    with pytest.raises(UndefinedMetricError):
        concordance_index(CohortRisks([1.0, 2.0], [1, 2], [0, 0]))
    with pytest.raises(ValidationError):
        concordance_index(CohortRisks([1.0], [1], [1]))


def random_cohort(rng, n, censor=0.3, ties=False):
    time = rng.integers(0, 20, n).astype(float) if ties else rng.exponential(12, n)
    risk = rng.integers(0, 5, n).astype(float) if ties else rng.normal(size=n)
    return CohortRisks(risk, time, (rng.random(n) >= censor).astype(int))


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 200), ties=st.booleans())
def test_concordance_matches_brute_force(seed, n, ties):
    c = random_cohort(np.random.default_rng(seed), n, ties=ties)
    comp, conc, tied = brute_concordance(c.risk, c.time, c.event)
    if comp == 0:
        with pytest.raises(UndefinedMetricError):
            concordance_index(c)
        return
    r = concordance_index(c)
    assert (r.comparable_pairs, r.concordant, r.tied_risk) == (comp, conc, tied)
    assert r.comparable_pairs <= n * (n - 1) // 2
    assert 0.0 <= r.c_index <= 1.0


def test_concordance_invariant_to_monotone_transforms(rng):
    for _ in range(20):
        c = random_cohort(rng, 50)
        base = concordance_index(c).c_index
        for f in (np.exp, lambda x: 3.0 * x - 7.0):
            assert concordance_index(CohortRisks(f(c.risk), c.time, c.event)).c_index == base


def test_roc_perfect_separation():
    curve = roc_points([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert curve.auc == 1.0
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)


def test_roc_example():
    assert roc_points([0.9, 0.4, 0.35, 0.8], [1, 0, 1, 0]).auc == pytest.approx(0.5, abs=1e-15)


def test_roc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_points([0.1, 0.2], [1, 1])


def test_roc_tied_scores_take_one_step():
    curve = roc_points([0.5, 0.5, 0.5, 0.1], [1, 0, 1, 0])
    assert curve.points == ((0.0, 0.0), (0.5, 1.0), (1.0, 1.0))
    assert curve.thresholds[1:] == (0.5, 0.1)
    assert curve.auc == pytest.approx(mann_whitney_auc([0.5, 0.5, 0.5, 0.1], [1, 0, 1, 0]))


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 150), ties=st.booleans())
def test_auc_equals_mann_whitney(seed, n, ties):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 4, n).astype(float) if ties else rng.normal(size=n)
    curve = roc_points(scores, labels)
    assert abs(curve.auc - mann_whitney_auc(scores, labels)) < 1e-10
    fpr, tpr = np.array(curve.points).T
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
    trapezoid = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    assert curve.auc == trapezoid
    for f in (np.exp, lambda x: 0.5 * x + 2.0):
        assert roc_points(f(scores), labels).auc == pytest.approx(curve.auc, abs=1e-12)
