import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ultrlab.data import Dataset, Query
from ultrlab.metrics import (
    MetricReport,
    SystemResult,
    batch_metrics,
    err_at_k,
    evaluate_scores,
    fisher_randomization_test,
    ndcg_at_k,
)


def brute_ndcg(labels, k):
    def dcg(seq):
        return sum((2**y - 1) / math.log2(i + 2) for i, y in enumerate(seq[:k]))

    ideal = dcg(sorted(labels, reverse=True))
    return 0.0 if ideal == 0 else dcg(labels) / ideal


def brute_err(labels, k):
    total, keep_going = 0.0, 1.0
    for i, y in enumerate(labels[:k], start=1):
        r = (2**y - 1) / 16
        total += keep_going * r / i
        keep_going *= 1 - r
    return total


def test_ndcg_examples():
    assert ndcg_at_k([4, 3, 3, 1, 0], 5) == 1.0
    assert ndcg_at_k([3, 0, 1], 3) == pytest.approx(7.5 / (7 + 1 / math.log2(3)), abs=1e-12)
    assert ndcg_at_k([3, 0, 1], 3) == pytest.approx(0.9828, abs=1e-4)
    assert ndcg_at_k([0, 0, 0], 3) == 0.0


def test_err_examples():
    assert err_at_k([4], 1) == 0.9375
    assert err_at_k([0, 0], 2) == 0.0
    assert err_at_k([4, 4], 2) == pytest.approx(0.9375 + 0.5 * 0.0625 * 0.9375, abs=1e-15)


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        ndcg_at_k([1], 0)
    with pytest.raises(ValueError):
        err_at_k([1], 0)


def test_batch_matches_scalar(rng):
    labels = rng.integers(0, 5, size=(40, 12))
    mask = np.ones_like(labels, dtype=bool)
    mask[5, 7:] = False
    out = batch_metrics(labels, mask)
    for q in range(40):
        row = labels[q][mask[q]].tolist()
        for k in (1, 3, 5, 10):
            assert out["ndcg"][k][q] == pytest.approx(brute_ndcg(row, k), abs=1e-12)
            assert out["err"][k][q] == pytest.approx(brute_err(row, k), abs=1e-12)


def test_evaluate_scores_uses_stable_ties():
    q = Query("q", ("a", "b"), np.zeros((2, 1)), [0, 4])
    ds = Dataset((q,), 1, "test")
    assert evaluate_scores(ds, np.array([[0.0, 0.0]]))["ndcg"][1][0] == 0.0
    assert evaluate_scores(ds, np.array([[0.0, 1.0]]))["ndcg"][1][0] == 1.0


def test_fisher_identical():
    a = np.linspace(0, 1, 20)
    assert fisher_randomization_test(a, a, 1000, rng=0) == 1.0


def test_fisher_all_ones_against_zeros():
    p = fisher_randomization_test(np.ones(10), np.zeros(10), 10_000, rng=0)
    exact = 2 / 2**10
    assert p < 0.01
    assert p == pytest.approx(exact, abs=0.002)


def test_fisher_exact_enumeration_agrees(rng):
    a, b = rng.random(8), rng.random(8)
    d = a - b
    obs = abs(d.mean())
    flips = np.array(list(itertools.product([-1, 1], repeat=8)))
    exact = np.mean(np.abs(flips @ d) / 8 >= obs - 1e-12)
    assert fisher_randomization_test(a, b, 50_000, rng=1) == pytest.approx(exact, abs=0.01)


def test_fisher_preconditions():
    with pytest.raises(ValueError):
        fisher_randomization_test([1.0], [1.0], 0)
    with pytest.raises(ValueError):
        fisher_randomization_test([1.0, 2.0], [1.0])


def test_report_csv_columns():
    per = {m: {k: np.array([[0.5, 0.7], [0.6, 0.8]]) for k in (1, 3, 5, 10)} for m in ("ndcg", "err")}
    res = SystemResult("a", per, {m: {k: 0.5 for k in (1, 3, 5, 10)} for m in ("ndcg", "err")})
    report = MetricReport({"a": res}, "b")
    header = report.to_csv().splitlines()[0]
    assert header == "system,metric,cutoff,mean,std,p_vs_baseline"
    assert len(report.rows()) == 8
    assert res.mean("ndcg", 10) == pytest.approx(0.65)
    assert res.std("ndcg", 10) == pytest.approx(0.05)


label_lists = st.lists(st.integers(0, 4), min_size=1, max_size=15)


@given(label_lists, st.integers(1, 15))
def test_matches_brute_force(labels, k):
    assert abs(ndcg_at_k(labels, k) - brute_ndcg(labels, k)) <= 1e-12
    assert abs(err_at_k(labels, k) - brute_err(labels, k)) <= 1e-12


@given(label_lists, st.integers(1, 15))
def test_bounds_and_err_monotone_in_k(labels, k):
    assert 0.0 <= ndcg_at_k(labels, k) <= 1.0 + 1e-12
    assert 0.0 <= err_at_k(labels, k) <= err_at_k(labels, k + 1) <= 1.0


@given(label_lists, st.integers(1, 15), st.data())
def test_swapping_low_high_pair_never_hurts(labels, k, data):
    if len(labels) < 2:
        return
    i = data.draw(st.integers(0, len(labels) - 2))
    if labels[i] >= labels[i + 1]:
        return
    swapped = list(labels)
    swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
    assert ndcg_at_k(swapped, k) >= ndcg_at_k(labels, k) - 1e-12


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.data())
def test_fisher_symmetric(a, data):
    b = data.draw(st.lists(st.floats(0, 1), min_size=len(a), max_size=len(a)))
    assert fisher_randomization_test(a, b, 200, rng=7) == fisher_randomization_test(b, a, 200, rng=7)
