import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from escm2.causal_diag import (SWEEP_COLUMNS, MatchedSample, MatchingError, UndefinedRatioError,
                               causal_risk_ratio, causal_strength, default_caliper, ieb_report,
                               psm_match, ranking_metrics, summarize_sweep, sweep, write_sweep_csv)


def greedy_reference(p, t, caliper, ratio=1):
    """Quadratic-time greedy matching on the logit scale, written for clarity."""
    x = logit(np.asarray(p, dtype=float)).tolist()
    treated = sorted((i for i in range(len(p)) if t[i]), key=lambda i: -x[i])
    free = sorted((i for i in range(len(p)) if not t[i]), key=lambda i: x[i])
    pairs = []
    for _ in range(ratio):
        for i in treated:
            best, best_gap = None, math.inf
            for j in free:
                gap = abs(x[i] - x[j])
                # free is sorted, so '<' keeps the lower control on an exact tie
                if gap < best_gap:
                    best, best_gap = j, gap
            if best is not None and best_gap <= caliper:
                pairs.append((i, best))
                free.remove(best)
    return pairs


def optimal_assignment(p, t, caliper):
    """Most pairs within caliper, then least total logit gap, by exhaustive search."""
    x = [math.log(v / (1 - v)) for v in p]
    treated = [i for i in range(len(p)) if t[i]]
    controls = [j for j in range(len(p)) if not t[j]]
    options = {i: [j for j in controls if abs(x[i] - x[j]) <= caliper] for i in treated}
    best = (0, 0.0, [])

    def search(k, used, pairs, gap):
        nonlocal best
        if k == len(treated):
            if len(pairs) > best[0] or (len(pairs) == best[0] and gap < best[1] - 1e-12):
                best = (len(pairs), gap, list(pairs))
            return
        i = treated[k]
        for j in options[i]:
            if j not in used:
                used.add(j)
                pairs.append((i, j))
                search(k + 1, used, pairs, gap + abs(x[i] - x[j]))
                pairs.pop()
                used.discard(j)
        search(k + 1, used, pairs, gap)

    search(0, set(), [], 0.0)
    return best


def test_identical_propensities_match_up_to_supply():
    m = psm_match(np.full(10, 0.3), [1, 1, 1, 0, 0, 0, 0, 0, 0, 0], caliper=0.1)
    assert m.matched_count == 3 and m.unmatched_count == 0
    m = psm_match(np.full(6, 0.3), [1, 1, 1, 1, 0, 0], caliper=0.1)
    assert m.matched_count == 2 and m.unmatched_count == 2


def test_disjoint_ranges_raise_with_suggestion():
    with pytest.raises(MatchingError, match="wider caliper"):
        psm_match([0.9, 0.95, 0.01, 0.02], [1, 1, 0, 0], caliper=0.1)


def test_preconditions():
    with pytest.raises(MatchingError):
        psm_match([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        psm_match([0.1, 0.2], [1, 0], caliper=0)
    with pytest.raises(ValueError):
        psm_match([0.1, 0.2, 0.3], [1, 0])


def test_hand_built_case_matches_exhaustive_assignment():
    # six clicked rows in three propensity clusters, fourteen controls spread around them
    clicked = [0.050, 0.055, 0.200, 0.210, 0.600, 0.900]
    controls = [0.048, 0.052, 0.058, 0.150, 0.195, 0.205, 0.230, 0.400,
                0.590, 0.620, 0.700, 0.010, 0.020, 0.300]
    p = np.array(clicked + controls)
    t = np.array([1] * 6 + [0] * 14)
    caliper = 0.15
    m = psm_match(p, t, caliper=caliper)
    count, total_gap, _ = optimal_assignment(p, t, caliper)
    assert m.matched_count == count
    assert m.gaps.sum() == pytest.approx(total_gap, abs=1e-12)
    assert m.unmatched_count == 1  # the 0.9 row has no control within reach


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_fast_greedy_equals_reference(seed, ratio):
    r = np.random.default_rng(seed)
    n = int(r.integers(4, 60))
    # coarse values create exact ties in propensity
    p = np.round(r.uniform(0.01, 0.99, n), int(r.integers(1, 4)))
    p = np.clip(p, 0.01, 0.99)
    t = (r.uniform(size=n) < 0.4).astype(int)
    t[0], t[1] = 1, 0
    caliper = float(r.uniform(0.05, 1.5))
    expected = greedy_reference(p, t, caliper, ratio)
    if not expected:
        with pytest.raises(MatchingError):
            psm_match(p, t, caliper=caliper, ratio=ratio)
        return
    m = psm_match(p, t, caliper=caliper, ratio=ratio)
    assert [tuple(x) for x in m.pairs.tolist()] == expected
    assert np.all(m.gaps <= caliper)
    assert np.unique(m.pairs[:, 1]).size == m.matched_count
    assert np.all(t[m.pairs[:, 0]] == 1) and np.all(t[m.pairs[:, 1]] == 0)


def test_matching_is_deterministic(rng):
    p = rng.uniform(0.01, 0.5, 500)
    t = (rng.uniform(size=500) < p).astype(int)
    a, b = psm_match(p, t), psm_match(p, t)
    assert np.array_equal(a.pairs, b.pairs)


def test_default_caliper():
    p = np.array([0.1, 0.2, 0.5, 0.7])
    lg = np.log(p / (1 - p))
    assert default_caliper(p) == pytest.approx(0.2 * lg.std())


def _matched(pairs):
    pairs = np.asarray(pairs)
    return MatchedSample(pairs=pairs, gaps=np.zeros(len(pairs)), caliper=1.0, unmatched_count=0)


def test_crr_arithmetic():
    rep = causal_risk_ratio(_matched([(0, 2), (1, 3)]), [0.2, 0.2, 0.1, 0.1])
    assert rep.crr == pytest.approx(2.0)
    assert rep.strength == pytest.approx(1.0)
    assert rep.strength == abs(rep.crr - 1)
    assert rep.to_dict() == {"model": "", "crr": rep.crr, "strength": rep.strength, "matched_count": 2}


def test_crr_zero_denominator():
    with pytest.raises(UndefinedRatioError):
        causal_risk_ratio(_matched([(0, 1)]), [0.3, 0.0])


def test_outcomes_independent_of_click_give_unit_ratio(rng):
    n = 40000
    ctr = rng.uniform(0.02, 0.3, n)
    click = (rng.uniform(size=n) < ctr).astype(int)
    cvr = 0.1 + 0.2 * ctr  # depends on the propensity only
    rep = causal_strength(ctr, cvr, click)
    assert rep.strength < 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_ratio_is_scale_invariant(seed, c):
    r = np.random.default_rng(seed)
    p = r.uniform(0.05, 0.5, 200)
    t = (r.uniform(size=200) < 0.3).astype(int)
    y = r.uniform(0.01, 1, 200)
    m = psm_match(p, t, caliper=1.0)
    assert causal_risk_ratio(m, c * y).crr == pytest.approx(causal_risk_ratio(m, y).crr, rel=1e-12)


def test_ieb_report_rows():
    rows = ieb_report({"flat": [np.full(10, 0.05), np.full(10, 0.05)],
                       "high": [np.full(5, 0.07), np.full(5, 0.09)]}, 0.05)
    flat, high = rows
    assert flat["bias"] == pytest.approx(0.0, abs=1e-15) and flat["positive_bias_seeds"] == 0
    assert high["bias"] == pytest.approx(0.03) and high["positive_bias_seeds"] == 2
    assert high["estimate_std"] == pytest.approx(np.std([0.07, 0.09], ddof=1))
    with pytest.raises(ValueError):
        ieb_report({}, 0.1)


def _fake_cell(param, value, seed):
    if value == 2.0 and seed == 1:
        raise RuntimeError("diverged")
    base = 0.7 + 0.01 * value + 0.001 * seed
    return {"auc_cvr": base, "ks_cvr": base - 0.4, "auc_ctcvr": base + 0.1, "ks_ctcvr": base - 0.3}


@pytest.mark.parametrize("jobs", [1, 2])
def test_sweep_records_failures_and_continues(tmp_path, jobs):
    cells = sweep("lambda_c", [0.0, 1.0, 2.0], [0, 1], _fake_cell, jobs=jobs)
    assert len(cells) == 6
    failed = [c for c in cells if c.error]
    assert len(failed) == 1 and "diverged" in failed[0].error
    summary = summarize_sweep(cells)
    assert [s["value"] for s in summary] == [0.0, 1.0, 2.0]
    assert summary[2]["n"] == 1 and summary[2]["failed"] == 1
    assert summary[1]["auc_cvr_mean"] == pytest.approx(0.7105)
    write_sweep_csv(cells, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == ",".join(SWEEP_COLUMNS)


def test_sweep_validates_inputs():
    with pytest.raises(ValueError):
        sweep("lr", [0.0], [0], _fake_cell)
    with pytest.raises(ValueError):
        sweep("lambda_g", [], [0], _fake_cell)
    with pytest.raises(ValueError):
        sweep("lambda_g", [1.0, 0.0], [0], _fake_cell)


def test_ranking_metrics_keys():
    pred = {"cvr": np.array([0.9, 0.1, 0.5, 0.4]), "ctcvr": np.array([0.5, 0.1, 0.2, 0.3])}
    out = ranking_metrics(pred, [1, 1, 0, 1], [1, 0, 0, 0])
    assert set(out) == {"auc_cvr", "ks_cvr", "auc_ctcvr", "ks_ctcvr"}
    assert out["auc_cvr"] == 1.0
