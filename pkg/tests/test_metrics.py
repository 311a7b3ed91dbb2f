from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sketchgp.metrics import (FOUR_FEET_M, EvalReport, coverage_and_interval_score, energy_score, evaluate,
                              mspe, threshold_error_pct, write_reports)

# ---- brute-force oracles written from the definitions


def oracle_mspe(draws, truth):
    L, N = len(draws), len(truth)
    total = 0.0
    for j in range(N):
        mean = sum(draws[l][j] for l in range(L)) / L
        total += (mean - truth[j]) ** 2
    return total / N


def oracle_quantile(col, p):
    x = sorted(col)
    h = (len(x) - 1) * p
    lo = math.floor(h)
    return x[lo] + (h - lo) * (x[min(lo + 1, len(x) - 1)] - x[lo])


def oracle_interval(draws, truth, alpha=0.05):
    cov, score = 0, 0.0
    for j in range(len(truth)):
        col = [row[j] for row in draws]
        lo, hi = oracle_quantile(col, alpha / 2), oracle_quantile(col, 1 - alpha / 2)
        y = truth[j]
        cov += lo <= y <= hi
        score += (hi - lo) + (2 / alpha) * max(lo - y, 0) + (2 / alpha) * max(y - hi, 0)
    return cov / len(truth), score / len(truth)


def oracle_energy(draws, truth):
    L = len(draws)

    def norm(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    first = sum(norm(d, truth) for d in draws) / L
    second = sum(norm(a, b) for a in draws for b in draws) / (2 * L * L)
    return first - second


def fixtures(count=100):
    rng = np.random.default_rng(123)
    for _ in range(count):
        L, N = int(rng.integers(40, 70)), int(rng.integers(1, 6))
        draws = rng.normal(rng.normal(), rng.uniform(0.2, 3), size=(L, N))
        truth = rng.normal(size=N) * 2
        yield draws, truth


def test_metrics_match_oracles():
    for draws, truth in fixtures():
        d, t = draws.tolist(), truth.tolist()
        assert mspe(draws, truth) == pytest.approx(oracle_mspe(d, t), abs=1e-12)
        c, s = coverage_and_interval_score(draws, truth)
        oc, os_ = oracle_interval(d, t)
        assert c == oc and s == pytest.approx(os_, abs=1e-12)
        assert energy_score(draws, truth) == pytest.approx(oracle_energy(d, t), abs=1e-10)


def test_trivial_cases():
    truth = np.array([1.0, -2.0])
    same = np.tile(truth, (50, 1))
    assert mspe(same, truth) == 0.0
    assert energy_score(same, truth) == 0.0
    assert mspe(np.full((5, 1), 3.0), [1.0]) == 4.0
    a, b, t = 0.3, 2.0, 1.1
    assert energy_score([[a], [b]], [t]) == pytest.approx((abs(a - t) + abs(b - t)) / 2 - abs(a - b) / 4, abs=1e-15)


def test_interval_score_regimes():
    draws = np.linspace(-10, 10, 401)[:, None]
    c, s = coverage_and_interval_score(draws, [0.0])
    lo, hi = np.quantile(draws, [0.025, 0.975])
    assert c == 1.0 and s == pytest.approx(hi - lo)
    c, s = coverage_and_interval_score(draws, [100.0])
    assert c == 0.0 and s == pytest.approx((hi - lo) + 40 * (100 - hi))


def test_small_L_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        coverage_and_interval_score(np.zeros((10, 1)), [0.0])
    assert any("draws" in str(x.message) for x in w)


def test_threshold_errors():
    truth = np.array([0.5, 2.0, 0.7, 3.0])
    assert threshold_error_pct(np.tile(truth, (3, 1)), truth) == 0.0
    wrong = np.tile([2.0, 0.5, 2.0, 0.1], (3, 1))
    assert threshold_error_pct(wrong, truth) == 100.0
    half = np.tile([0.5, 0.5, 2.0, 3.0], (3, 1))
    assert threshold_error_pct(half, truth) == 50.0
    assert FOUR_FEET_M == pytest.approx(1.2192)
    # rule switch: mean above threshold, but mostly below
    skew = np.array([[0.0], [0.0], [10.0]])
    assert threshold_error_pct(skew, [2.0], rule="mean") == 0.0
    assert threshold_error_pct(skew, [2.0], rule="probability") == 100.0
    with pytest.raises(ValueError):
        threshold_error_pct(skew, [2.0], rule="vote")


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mspe(np.zeros((3, 2)), np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=st.floats(-50, 50)),
       st.randoms(use_true_random=False))
def test_energy_nonnegative_and_permutation_invariant(draws, rnd):
    truth = draws[0] * 0.5 + 1.0
    e = energy_score(draws, truth)
    assert e >= -1e-9
    perm = list(range(len(draws)))
    rnd.shuffle(perm)
    p = draws[perm]
    assert energy_score(p, truth) == pytest.approx(e, abs=1e-9)
    assert mspe(p, truth) == pytest.approx(mspe(draws, truth), abs=1e-9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert coverage_and_interval_score(p, truth) == pytest.approx(coverage_and_interval_score(draws, truth))


def test_energy_zero_only_at_truth():
    truth = np.zeros(2)
    assert energy_score(np.zeros((4, 2)), truth) == 0.0
    assert energy_score(np.array([[0.0, 0.0], [0.0, 1e-3]]), truth) > 0


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 3), st.floats(-3, 3), st.floats(0.01, 3))
def test_interval_score_prefers_covering(y, width, shift, extra):
    # widening an interval that misses y toward y never raises the score
    alpha = 0.05

    def score(lo, hi):
        return (hi - lo) + (2 / alpha) * max(lo - y, 0) + (2 / alpha) * max(y - hi, 0)

    lo = y + abs(shift) + 0.01
    hi = lo + width
    assert score(min(lo, y), hi) <= score(lo, hi) + 1e-12
    lo2 = y - abs(shift) - 0.01 - width
    hi2 = lo2 + width
    assert score(lo2, max(hi2, y)) <= score(lo2, hi2) + 1e-12


def test_energy_subsampled_above_cap():
    rng = np.random.default_rng(0)
    draws = rng.normal(size=(3000, 3))
    exact = energy_score(draws, np.zeros(3), max_exact=10**6)
    sub = energy_score(draws, np.zeros(3))
    assert sub == pytest.approx(exact, rel=0.02)
    assert energy_score(draws, np.zeros(3)) == sub


def test_report_outputs(tmp_path):
    draws = np.random.default_rng(1).normal(size=(100, 6))
    r = evaluate(draws, np.zeros(6), n0=3, S0=2, label="x")
    assert isinstance(r, EvalReport) and 0 <= r.coverage <= 1 and 0 <= r.error_pct <= 100
    write_reports([r], tmp_path / "e.csv", {"config_hash": "abc"})
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0].split(",") == list(EvalReport.FIELDS) + ["config_hash"]
    assert "mspe" in r.table()
