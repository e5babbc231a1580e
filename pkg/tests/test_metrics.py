import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from escm2.metrics import (UndefinedMetricError, auc, best_pr_f1_recall, cvr_expectation_bias, ks,
                           metric_suite)

from oracles import brute_auc, brute_f1_recall, brute_ks, random_set


def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5


def test_ks_examples():
    assert ks([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert ks([0.4] * 4, [1, 0, 1, 0]) == 0.0


def test_f1_examples():
    assert best_pr_f1_recall([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == (1.0, 1.0)
    p = 3 / 10
    f1, recall = best_pr_f1_recall([0.5] * 10, [1] * 3 + [0] * 7)
    assert f1 == pytest.approx(2 * p / (1 + p), abs=1e-15)
    assert recall == 1.0


def test_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        ks([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetricError):
        best_pr_f1_recall([0.1, 0.2], [0, 0])
    suite = metric_suite([0.1, 0.2], [0, 0])
    assert all(math.isnan(v) for v in suite.values())


def test_bad_inputs():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        auc([0.1], [1, 0])
    with pytest.raises(ValueError):
        cvr_expectation_bias([], 0.1)


def test_metrics_match_brute_force_on_random_sets():
    r = np.random.default_rng(0)
    for _ in range(100):
        s, y = random_set(r, int(r.integers(2, 1001)))
        assert abs(auc(s, y) - brute_auc(s, y)) < 1e-12
        if len(s) <= 300:
            assert abs(ks(s, y) - brute_ks(s, y)) < 1e-12
            f1, rec = best_pr_f1_recall(s, y)
            bf1, brec = brute_f1_recall(s, y)
            assert abs(f1 - bf1) < 1e-12 and abs(rec - brec) < 1e-12


def test_bias_measure():
    assert cvr_expectation_bias([0.2, 0.2], 0.2) == 0.0
    # label mean 0.0056 against an estimate mean of 0.0113
    assert cvr_expectation_bias([0.0113] * 5, 0.0056) == pytest.approx(0.0057, abs=1e-12)


_scored = st.integers(0, 2**32 - 1).map(lambda seed: random_set(np.random.default_rng(seed), 40))


@settings(max_examples=60, deadline=None)
@given(_scored)
def test_monotone_transform_invariance(sy):
    s, y = sy
    t = np.exp(3 * s) - 7
    assert auc(t, y) == pytest.approx(auc(s, y), abs=1e-15)
    assert ks(t, y) == pytest.approx(ks(s, y), abs=1e-15)
    assert best_pr_f1_recall(t, y) == pytest.approx(best_pr_f1_recall(s, y), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_label_flip_complements_auc(seed):
    r = np.random.default_rng(seed)
    s = r.permutation(30) / 30.0
    y = np.r_[1, 0, r.integers(0, 2, 28)]
    assert auc(s, y) + auc(s, 1 - y) == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(_scored)
def test_ranges(sy):
    s, y = sy
    out = metric_suite(s, y)
    assert all(0.0 <= v <= 1.0 for v in out.values())
