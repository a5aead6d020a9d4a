"""Ranking metrics against brute-force oracles."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lpxmc.metrics import (
    PropensityModel, dataset_precision_at_k, dataset_psp_at_k, metrics_report,
    precision_at_k, propensity_from_frequencies, psp_at_k, top_k_indices,
)


def _brute_top_k(scores, k):
    """Oracle: best score first, ties broken by lower label index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def _brute_p_at_k(scores, truth, k):
    top = _brute_top_k(scores, k)
    return sum(1 for i in top if i in truth) / k


def _brute_psp_at_k(scores, truth, props, k):
    top = _brute_top_k(scores, k)
    return sum(1 / props[i] for i in top if i in truth) / k


def test_top_k_tie_break_lower_index():
    scores = np.array([0.5, 0.9, 0.9, 0.1])
    assert top_k_indices(scores, 2).tolist() == [1, 2]
    tied = np.array([1.0, 1.0, 1.0])
    assert top_k_indices(tied, 2).tolist() == [0, 1]


def test_metrics_match_brute_force_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        L = int(rng.integers(3, 30))
        k = int(rng.integers(1, min(L, 6)))
        scores = rng.normal(size=L)
        if rng.random() < 0.3:  # force ties sometimes
            scores = np.round(scores, 1)
        truth = set(rng.choice(L, size=int(rng.integers(1, 4)), replace=False).tolist())
        props = rng.uniform(0.05, 1.0, size=L)
        pm = PropensityModel(props)
        assert precision_at_k(scores, truth, k) == _brute_p_at_k(scores, truth, k)
        got = psp_at_k(scores, truth, pm, k)
        assert got == pytest.approx(_brute_psp_at_k(scores, truth, props, k), rel=1e-12)


def test_psp_reduces_to_p_with_uniform_propensity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        L = int(rng.integers(3, 20))
        scores = rng.normal(size=L)
        truth = set(rng.choice(L, size=2, replace=False).tolist())
        pm = PropensityModel.uniform(L)
        k = int(rng.integers(1, min(L, 5)))
        assert psp_at_k(scores, truth, pm, k) == pytest.approx(
            precision_at_k(scores, truth, k))


def test_dataset_metrics_average_per_sample():
    scores = np.array([[3.0, 2.0, 1.0], [1.0, 2.0, 3.0]])
    truths = [{0}, {0}]
    # sample 1: hit at rank 1; sample 2: miss at rank 1
    assert dataset_precision_at_k(scores, truths, 1) == 0.5
    assert dataset_precision_at_k(scores, truths, 3) == pytest.approx((1 / 3 + 1 / 3) / 2)


def test_k_times_p_at_k_nondecreasing():
    rng = np.random.default_rng(2)
    for _ in range(100):
        scores = rng.normal(size=20)
        truth = set(rng.choice(20, size=3, replace=False).tolist())
        hits = [k * precision_at_k(scores, truth, k) for k in range(1, 10)]
        assert all(a <= b + 1e-12 for a, b in zip(hits, hits[1:]))


def test_score_permutation_consistency():
    # relabeling labels (and truth/propensity with them) leaves metrics
    # unchanged when scores are untied
    rng = np.random.default_rng(3)
    L = 15
    scores = rng.normal(size=L)
    truth = {2, 7}
    props = rng.uniform(0.1, 1, size=L)
    perm = rng.permutation(L)
    inv = np.argsort(perm)
    p1 = precision_at_k(scores, truth, 3)
    p2 = precision_at_k(scores[inv], {int(perm[t]) for t in truth}, 3)
    assert p1 == p2


def test_propensity_from_frequencies_formula():
    counts = np.array([100, 10, 1, 0])
    n = 1000
    a, b = 0.55, 1.5
    p = propensity_from_frequencies(counts, n, a=a, b=b)
    c = (np.log(n) - 1) * (b + 1) ** a
    expect = 1.0 / (1.0 + c * np.exp(-a * np.log(counts + b)))
    assert np.allclose(p.propensities, expect)
    assert np.all((p.propensities > 0) & (p.propensities <= 1))
    # rarer labels -> lower propensity -> higher PSP reward
    assert p.propensities[0] > p.propensities[1] > p.propensities[2]


def test_propensity_model_validation():
    with pytest.raises(ValueError):
        PropensityModel(np.array([0.5, 0.0]))
    with pytest.raises(ValueError):
        PropensityModel(np.array([0.5, 1.2]))


def test_psp_requires_matching_size():
    pm = PropensityModel(np.array([0.5, 0.5]))
    scores = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
    with pytest.raises((ValueError, IndexError)):
        psp_at_k(scores, {4}, pm, 2)  # hit on a label with no propensity


def test_metrics_report_json_and_text():
    records = [{"metric": "P", "k": 1, "value": 0.5},
               {"metric": "PSP", "k": 3, "value": 0.25}]
    out = metrics_report(records, as_json=True)
    lines = [json.loads(l) for l in out.strip().splitlines()]
    assert lines[0]["value"] == 0.5
    text = metrics_report(records, as_json=False)
    assert "P" in text and "0.5" in text


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=20),
       st.integers(1, 3))
@settings(max_examples=100, deadline=None)
def test_precision_bounds_property(scores, k):
    scores = np.asarray(scores)
    truth = {0, 1}
    p = precision_at_k(scores, truth, k)
    assert 0.0 <= p <= 1.0
    assert p * k <= len(truth) + 1e-12
