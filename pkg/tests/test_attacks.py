from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sage_ids import attacks, data, nnet
from sage_ids.attacks import AttackKind, AttackSpec

from .conftest import random_model


def box(d, lo=-3.0, hi=3.0):
    return np.full(d, lo), np.full(d, hi)


def small_ds(seed=0, n=40, d=5, C=3):
    return data.synth_generate(n * C, d, C, seed=seed)


@pytest.mark.parametrize("kind", attacks.ALL_KINDS)
def test_zero_epsilon_is_identity(kind, small_model, small_data):
    _, test = small_data
    adv = attacks.run_attack(small_model, test, AttackSpec(kind, 0.0, 3))
    assert np.array_equal(adv.X_adv, test.X)


@pytest.mark.parametrize("kind", attacks.ALL_KINDS)
@pytest.mark.parametrize("eps", attacks.EPSILON_GRID)
def test_ball_and_box_invariants(kind, eps, small_model, small_data):
    _, test = small_data
    adv = attacks.run_attack(small_model, test, AttackSpec(kind, eps, 3), seed=1)
    assert adv.X_adv.shape == test.X.shape
    assert np.all(np.abs(adv.X_adv - test.X) <= eps)
    assert np.all(adv.X_adv >= test.feature_lo) and np.all(adv.X_adv <= test.feature_hi)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1e-3, 0.01, 0.1, 0.3, 1.0 / 3.0]))
def test_project_is_exact(seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 4)) * 10
    lo, hi = x.min(axis=0) - 0.05, x.max(axis=0) + 0.05
    out = attacks.project(x + rng.normal(size=x.shape), x, eps, lo, hi)
    assert np.all(np.abs(out - x) <= eps)
    assert np.all(out >= lo) and np.all(out <= hi)


def test_fgsm_one_dimensional_logistic():
    # class-0 logit decreases in x, so the class-0 loss increases in x
    m = nnet.NeuralModel((np.array([[-1.0, 1.0]]),), (np.zeros(2),))
    X = np.array([[0.2], [-0.4]])
    out = attacks.fgsm_array(m, X, np.array([0, 0]), 0.1, *box(1))
    # x + eps may be pulled back one ulp to keep |out - x| <= eps exactly
    np.testing.assert_allclose(out, X + 0.1, rtol=0, atol=1e-15)
    assert np.all(np.abs(out - X) <= 0.1)


def test_bim_single_full_step_equals_fgsm(small_model, small_data):
    _, test = small_data
    lo, hi = test.feature_lo, test.feature_hi
    a = attacks.fgsm_array(small_model, test.X, test.y, 0.2, lo, hi)
    b = attacks.bim_array(small_model, test.X, test.y, 0.2, 1, 0.2, lo, hi)
    np.testing.assert_array_equal(a, b)


def test_bim_ascends_loss(small_model, small_data):
    _, test = small_data
    adv = attacks.bim(small_model, test, 0.1, steps=5)
    z0 = -np.log(small_model.predict_proba(test.X)[np.arange(len(test.y)), test.y])
    z1 = -np.log(small_model.predict_proba(adv.X_adv)[np.arange(len(test.y)), test.y])
    assert (z1 >= z0).mean() >= 0.9


def test_pgd_without_random_start_equals_bim(small_model, small_data):
    _, test = small_data
    a = attacks.pgd(small_model, test, 0.2, steps=4, random_start=False)
    b = attacks.bim(small_model, test, 0.2, steps=4)
    np.testing.assert_array_equal(a.X_adv, b.X_adv)


def test_pgd_start_in_ball_and_deterministic(small_model, small_data):
    _, test = small_data
    spec = AttackSpec(AttackKind.PGD, 0.2, 4)
    a = attacks.run_attack(small_model, test, spec, seed=9)
    b = attacks.run_attack(small_model, test, spec, seed=9)
    np.testing.assert_array_equal(a.X_adv, b.X_adv)
    c = attacks.run_attack(small_model, test, spec, seed=10)
    assert not np.array_equal(a.X_adv, c.X_adv)
    # seeds depend on sample id, not position: a subset reproduces its rows
    idx = np.arange(0, len(test.y), 3)
    sub = attacks.run_attack(small_model, test.subset(idx), spec, seed=9)
    np.testing.assert_array_equal(sub.X_adv, a.X_adv[idx])


def test_deepfool_linear_closed_form():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    m = nnet.NeuralModel((W,), (b,))
    X = rng.normal(size=(6, 3))
    y = m.predict(X)  # correctly classified by construction
    out = attacks.deepfool_array(m, X, y, eps=100.0, max_iters=50, overshoot=0.02, lo=np.full(3, -1e3), hi=np.full(3, 1e3))
    for i in range(len(X)):
        k, o = y[i], 1 - y[i]
        w = W[:, o] - W[:, k]
        f = (X[i] @ W + b)[o] - (X[i] @ W + b)[k]
        expected = X[i] + 1.02 * (abs(f) / (w @ w)) * w
        np.testing.assert_allclose(out[i], expected, rtol=1e-9, atol=1e-12)
    assert np.all(m.predict(out) != y)


def test_deepfool_leaves_misclassified_samples():
    m = nnet.NeuralModel((np.array([[1.0, -1.0]]),), (np.zeros(2),))
    X = np.array([[2.0]])
    out = attacks.deepfool_array(m, X, np.array([1]), 0.3, 50, 0.02, *box(1, -10, 10))
    np.testing.assert_array_equal(out, X)


def test_zoo_estimate_matches_analytic_gradient():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    m = nnet.NeuralModel((W,), (b,))
    X = rng.normal(size=(5, 4))
    y = m.predict(X)  # margin is positive, so the zero floor is inactive
    coords = np.tile(np.arange(4), (5, 1))
    est = attacks.zoo_coordinate_gradient(m, X, y, coords, 1e-4)
    z = X @ W + b
    z[np.arange(5), y] = -np.inf
    runner = z.argmax(axis=1)
    exact = (W[:, y] - W[:, runner]).T  # margin log p_y - log p_k is linear here
    np.testing.assert_allclose(est, exact, atol=1e-6)


class BlackBoxOnly:
    """Exposes forward outputs only; any gradient query is counted."""

    def __init__(self, m):
        self._m = m
        self.gradient_calls = 0

    def predict_proba(self, X, temperature=1.0):
        return self._m.predict_proba(X, temperature)

    def __getattr__(self, name):
        if name in ("input_gradients", "logit_jacobian", "forward_cache", "backward"):
            self.gradient_calls += 1
            raise AssertionError(f"black-box attack queried {name}")
        return getattr(self._m, name)


def test_zoo_never_queries_gradients(small_model, small_data):
    _, test = small_data
    proxy = BlackBoxOnly(small_model)
    adv = attacks.run_attack(proxy, test, AttackSpec(AttackKind.ZOO, 0.2, 3))
    assert proxy.gradient_calls == 0
    assert not np.array_equal(adv.X_adv, test.X)


def test_sini_degenerate_config_matches_bim():
    rng = np.random.default_rng(6)
    m = random_model(rng, (4, 6, 3))
    X = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, 8)
    lo, hi = box(4, -5, 5)
    a = attacks.sini_fgsm_array(m, X, y, 0.3, 5, 0.07, 0.0, 1, lo, hi, lookahead=False)
    b = attacks.bim_array(m, X, y, 0.3, 5, 0.07, lo, hi)
    np.testing.assert_array_equal(a, b)


def test_momentum_decays_under_zero_gradient():
    g = np.random.default_rng(0).normal(size=(3, 4))
    norms = []
    for _ in range(5):
        g = attacks.momentum_update(g, np.zeros_like(g), 0.9)
        norms.append(np.abs(g).sum())
    assert all(b <= a for a, b in zip(norms, norms[1:]))


def test_vni_single_zero_radius_neighbor_matches_sini():
    rng = np.random.default_rng(8)
    m = random_model(rng, (4, 6, 3))
    X = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, 8)
    lo, hi = box(4, -5, 5)
    nb = np.zeros((8, 5, 1, 4))
    a = attacks.vni_fgsm_array(m, X, y, 0.3, 5, 0.07, 1.0, 1, 0.0, lo, hi, nb)
    b = attacks.sini_fgsm_array(m, X, y, 0.3, 5, 0.07, 1.0, 1, lo, hi)
    np.testing.assert_array_equal(a, b)


def test_neighborhood_draws_within_radius():
    rngs = [np.random.default_rng(i) for i in range(4)]
    off = attacks.neighborhood_offsets(rngs, 1.5 * 0.2, 3, 5, 6)
    assert off.shape == (4, 3, 5, 6)
    assert np.all(np.abs(off) <= 0.3)


def test_freeze_categorical_leaves_one_hot_columns():
    raw = data.RawTable(
        {"proto": np.array(["tcp", "udp"] * 30, dtype=object), "v": np.linspace(0, 1, 60), "w": np.cos(np.arange(60.0))},
        np.array([0, 1, 1] * 20), "label",
    )
    ds = data.preprocess(raw)
    m = nnet.train(ds, nnet.TrainConfig(epochs=2, hidden=(4,)))
    adv = attacks.run_attack(m, ds, AttackSpec(AttackKind.PGD, 0.3, 3), freeze_categorical=True)
    cat = ~ds.continuous_mask
    np.testing.assert_array_equal(adv.X_adv[:, cat], ds.X[:, cat])


def test_generate_suite_roles_and_count(small_model, small_data, small_suite):
    assert len(small_suite) == 28
    train = [a for a in small_suite if a.role == "attack-train"]
    assert len(train) == 7 and all(a.epsilon == 0.1 for a in train)
    assert sum(a.role == "attack-test" for a in small_suite) == 21
    with pytest.raises(ValueError, match="unknown attack kind"):
        attacks.generate_suite(small_model, small_data[1], kinds=["CW"])


def test_suite_is_deterministic(small_model, small_data, small_suite):
    again = attacks.generate_suite(small_model, small_data[1], seed=7, steps=3)
    for a, b in zip(small_suite, again):
        np.testing.assert_array_equal(a.X_adv, b.X_adv)


def test_adv_csv_roundtrip(tmp_path, small_suite):
    adv = small_suite[5]
    attacks.save_adv_csv(adv, tmp_path / "a.csv")
    back = attacks.load_adv_csv(tmp_path / "a.csv", adv.base, adv.spec, adv.seeds, adv.role)
    np.testing.assert_array_equal(back.X_adv, adv.X_adv)


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(AttackKind.FGSM, -0.1)
    with pytest.raises(ValueError):
        AttackSpec(AttackKind.BIM, 0.1, steps=0)
    assert AttackSpec(AttackKind.BIM, 0.1, 10).alpha == pytest.approx(0.025)
