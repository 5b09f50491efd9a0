from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sage_ids import acquisition
from sage_ids.acquisition import AcquisitionConfig


def h2(p):
    return 0.0 if p in (0.0, 1.0) else -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


# -- scores -----------------------------------------------------------------


def test_closed_entropy_example():
    oracle = (h2(0.9) + h2(0.2)) / 2
    assert oracle == pytest.approx(0.5955, abs=1e-4)
    assert acquisition.closed_entropy(np.array([0.9, 0.2])) == pytest.approx(oracle, abs=1e-12)


def test_open_entropy_example():
    e1, e2 = math.exp(-1), math.exp(-2)
    q = (e1 / (e1 + e2), e2 / (e1 + e2))
    oracle = -(q[0] * math.log(q[0]) + q[1] * math.log(q[1])) / math.log(2)
    assert q == pytest.approx((0.7311, 0.2689), abs=1e-4)
    assert oracle == pytest.approx(0.8400, abs=1e-4)
    centers = np.array([[1.0, 0.0], [0.0, 2.0]])  # distances 1 and 2 from the origin
    np.testing.assert_allclose(acquisition.soft_assignment(np.zeros(2), centers, 1.0)[0], q, atol=1e-12)
    assert acquisition.open_entropy(np.zeros(2), centers, 1.0) == pytest.approx(oracle, abs=1e-12)


def test_composed_score_example():
    s = acquisition.acquisition_score(np.array([[0.9, 0.2]]), np.zeros((1, 2)), np.array([[1.0, 0.0], [0.0, 2.0]]), 1.0).s
    assert s[0] == pytest.approx(0.5955 - 0.8400, abs=1e-4)
    assert s[0] == pytest.approx(-0.2445, abs=1e-4)


def test_scores_in_unit_interval_on_random_inputs():
    rng = np.random.default_rng(0)
    P = rng.uniform(size=(10_000, 6))
    P[::7] = rng.integers(0, 2, size=P[::7].shape)  # hard 0/1 posteriors
    sc = acquisition.closed_entropy(P)
    F = rng.normal(size=(10_000, 4)) * rng.uniform(0.01, 100, size=(10_000, 1))
    centers = rng.normal(size=(5, 4)) * 3
    sd = np.concatenate([acquisition.open_entropy(F, centers, T) for T in (1e-3, 1.0, 1e3)])
    for v in (sc, sd):
        assert np.all(np.isfinite(v)) and np.all((v >= 0) & (v <= 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
def test_distance_softmax_shift_invariant(seed, c):
    d = np.random.default_rng(seed).uniform(0, 10, size=(4, 5))
    np.testing.assert_allclose(acquisition.distance_softmax(d + c, 0.7), acquisition.distance_softmax(d, 0.7), atol=1e-9)


def test_score_errors():
    with pytest.raises(ValueError):
        acquisition.closed_entropy(np.array([1.2, 0.1]))
    with pytest.raises(ValueError):
        acquisition.open_entropy(np.zeros(2), np.zeros((1, 2)), 1.0)
    with pytest.raises(ValueError):
        acquisition.soft_assignment(np.zeros(2), np.zeros((2, 2)), 0.0)


# -- k-means ----------------------------------------------------------------


def test_kmeans_on_k_points_is_exact():
    F = np.array([[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0]])
    centers, assign, inertia = acquisition.kmeans(F, 3, seed=1)
    assert inertia == 0.0
    assert sorted(map(tuple, centers)) == sorted(map(tuple, F))


def test_kmeans_two_blobs():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(50, 2)) * 0.3
    b = rng.normal(size=(50, 2)) * 0.3 + 10
    centers, assign, _ = acquisition.kmeans(np.vstack([a, b]), 2, seed=0)
    near = sorted(centers, key=lambda c: c[0])
    assert np.all(near[0] >= a.min(axis=0)) and np.all(near[0] <= a.max(axis=0))
    assert np.all(near[1] >= b.min(axis=0)) and np.all(near[1] <= b.max(axis=0))
    assert len(set(assign[:50])) == 1 and len(set(assign[50:])) == 1 and assign[0] != assign[50]


def test_kmeans_deterministic_and_errors():
    F = np.random.default_rng(3).normal(size=(60, 3))
    a = acquisition.kmeans(F, 4, seed=5)
    b = acquisition.kmeans(F, 4, seed=5)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        acquisition.kmeans(F[:3], 4)


# -- farthest-first ---------------------------------------------------------


def brute_farthest_first(scores, quota, F, factor):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    short = order[: factor * quota]
    if quota >= len(short):
        return short
    picks = [short[0]]
    while len(picks) < quota:
        best, best_d = None, -1.0
        for c in short:
            if c in picks:
                continue
            d = min(math.dist(F[c], F[p]) for p in picks)
            if d > best_d:
                best, best_d = c, d
        picks.append(best)
    return picks


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12), st.integers(1, 6), st.integers(1, 3))
def test_farthest_first_matches_brute_force(seed, n, quota, factor):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, size=n).astype(float)  # duplicates exercise tie-breaking
    F = rng.integers(-3, 4, size=(n, 2)).astype(float)
    assume_short = min(n, factor * quota)
    got = acquisition.select_batch(scores, quota, F, factor).tolist()
    assert got == brute_farthest_first(scores.tolist(), quota, F.tolist(), factor)
    assert len(got) == min(quota, assume_short)


def test_farthest_first_small_example():
    F = np.array([[0.0], [1.0], [10.0]])
    got = acquisition.select_batch(np.array([3.0, 2.0, 1.0]), 2, F, shortlist_factor=5)
    assert set(got.tolist()) == {0, 2}


def test_select_batch_errors():
    with pytest.raises(ValueError):
        acquisition.select_batch(np.ones(3), 0, np.zeros((3, 1)))
    with pytest.raises(ValueError):
        acquisition.select_batch(np.ones(0), 1, np.zeros((0, 1)))


# -- acquisition loops ------------------------------------------------------


def pool(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.choice(4, size=n, p=[0.6, 0.2, 0.15, 0.05])
    X = rng.normal(size=(n, 5)) + labels[:, None] * 1.5
    return X, labels


FAST = AcquisitionConfig(working_set=300, first_level_trees=15, first_level_depth=6, seed=0)


@pytest.mark.parametrize("strategy", acquisition.STRATEGIES)
def test_budget_sizes_and_uniqueness(strategy):
    X, labels = pool()
    res = acquisition.acquire(X, labels, FAST, strategy)
    assert list(res.subsets) == list(FAST.budgets)
    for b, idx in res.subsets.items():
        assert len(idx) == round(b * len(labels))
        assert len(np.unique(idx)) == len(idx)
        assert idx.min() >= 0 and idx.max() < len(labels)


@pytest.mark.parametrize("strategy", acquisition.STRATEGIES)
def test_acquisition_deterministic(strategy):
    X, labels = pool()
    a = acquisition.acquire(X, labels, FAST, strategy)
    b = acquisition.acquire(X, labels, FAST, strategy)
    for k in a.subsets:
        np.testing.assert_array_equal(a.subsets[k], b.subsets[k])


def test_large_budgets_are_nested():
    X, labels = pool()
    res = acquisition.acquire(X, labels, FAST, "eoal")
    sets = [set(res.subsets[b].tolist()) for b in (0.1, 0.2, 0.5)]
    assert sets[0] <= sets[1] <= sets[2]


def test_stratified_random_matches_class_shares():
    X, labels = pool()
    res = acquisition.acquire(X, labels, FAST, "stratified_random")
    for b, idx in res.subsets.items():
        want = b * np.bincount(labels, minlength=4)
        got = np.bincount(labels[idx], minlength=4)
        assert np.all(np.abs(got - want) <= 1)


def test_eoal_trace_records_scores():
    X, labels = pool()
    res = acquisition.acquire(X, labels, FAST, "eoal")
    assert res.trace
    for row in res.trace:
        assert {"round", "budget", "index", "s_c", "s_d", "s"} <= set(row)
        assert row["s"] == pytest.approx(row["s_c"] - row["s_d"])


def test_uncertainty_prefers_uniform_posteriors():
    P = np.array([[0.97, 0.01, 0.01, 0.01], [0.25, 0.25, 0.25, 0.25], [0.6, 0.2, 0.1, 0.1]])
    assert int(np.argmax(acquisition.predictive_entropy(P))) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        AcquisitionConfig(budgets=(0.2, 0.1))
    with pytest.raises(ValueError):
        AcquisitionConfig(budgets=(0.1, 0.7))
    AcquisitionConfig(budgets=(0.1, 1.0))
    with pytest.raises(ValueError):
        AcquisitionConfig(temperature=0.0)
    with pytest.raises(ValueError):
        AcquisitionConfig(K=1)
    with pytest.raises(ValueError):
        acquisition.acquire(*pool(), FAST, "magic")
    with pytest.raises(ValueError):
        acquisition.baseline_strategy("eoal", *pool(), FAST)
