from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sage_ids import data, nnet

from .conftest import random_model


def central_diff(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))


def test_zero_model_is_uniform():
    m = nnet.NeuralModel((np.zeros((3, 4)),), (np.zeros(4),))
    np.testing.assert_allclose(nnet.forward(m, np.ones((2, 3))), 0.25)


def test_hand_computed_softmax():
    W = np.array([[1.0, -1.0], [0.5, 2.0]])
    b = np.array([0.1, -0.2])
    x = np.array([[2.0, 1.0]])
    z = np.array([2.0 + 0.5 + 0.1, -2.0 + 2.0 - 0.2])
    expected = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(nnet.forward(nnet.NeuralModel((W,), (b,)), x)[0], expected, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_forward_rows_sum_to_one(seed, shift):
    rng = np.random.default_rng(seed)
    m = random_model(rng, (5, 7, 4), scale=3.0)
    P = nnet.forward(m, rng.normal(size=(6, 5)) * 10 + shift)
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)


def test_forward_dimension_mismatch():
    m = random_model(np.random.default_rng(0))
    with pytest.raises(ValueError):
        nnet.forward(m, np.zeros((2, 9)))


def test_loss_limits():
    # uniform predictions, C=2 -> ln 2
    m = nnet.NeuralModel((np.zeros((2, 2)),), (np.zeros(2),))
    assert math.isclose(nnet.cross_entropy(m, np.ones((3, 2)), np.array([0, 1, 0])), math.log(2), rel_tol=1e-12)
    # confident and correct -> ~0
    m = nnet.NeuralModel((np.zeros((2, 2)),), (np.array([60.0, -60.0]),))
    assert nnet.cross_entropy(m, np.ones((2, 2)), np.array([0, 0])) < 1e-12


def test_loss_errors():
    m = random_model(np.random.default_rng(0))
    with pytest.raises(ValueError):
        nnet.loss_and_param_grads(m, np.zeros((0, 4)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        nnet.loss_and_param_grads(m, np.zeros((1, 4)), np.array([3]))


@pytest.mark.parametrize("seed", range(20))
def test_param_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, (4, 6, 5, 3))
    X = rng.normal(size=(7, 4))
    y = rng.integers(0, 3, 7)
    _, (gW, gb) = nnet.loss_and_param_grads(m, X, y)
    Ws = [W.copy() for W in m.weights]
    bs = [b.copy() for b in m.biases]

    def loss():
        return nnet.cross_entropy(nnet.NeuralModel(tuple(Ws), tuple(bs)), X, y)

    for i in range(len(Ws)):
        assert rel_err(gW[i], central_diff(loss, Ws[i])) < 1e-5
        assert rel_err(gb[i], central_diff(loss, bs[i])) < 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_input_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_model(rng, (5, 8, 4))
    x = rng.normal(size=5)
    y = int(rng.integers(0, 4))
    g = nnet.input_gradient(m, x, y)
    xv = x.copy()
    fd = central_diff(lambda: nnet.cross_entropy(m, xv[None], np.array([y])), xv)
    assert rel_err(g, fd) < 1e-5


def test_input_gradient_linear_closed_form():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(3, 2))
    m = nnet.NeuralModel((W,), (rng.normal(size=2),))
    x = rng.normal(size=3)
    p = nnet.forward(m, x[None])[0]
    # y = 0: (p_0 - 1) w_0 + p_1 w_1
    expected = (p[0] - 1) * W[:, 0] + p[1] * W[:, 1]
    np.testing.assert_allclose(nnet.input_gradient(m, x, 0), expected, rtol=1e-12)


def test_input_gradient_vanishes_at_stationary_point():
    m = nnet.NeuralModel((np.zeros((3, 2)),), (np.array([50.0, -50.0]),))
    assert np.abs(nnet.input_gradient(m, np.ones(3), 0)).max() < 1e-12


def test_batched_input_gradients_match_single():
    rng = np.random.default_rng(3)
    m = random_model(rng, (4, 6, 3))
    X = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, 5)
    G = m.input_gradients(X, y)
    for i in range(5):
        np.testing.assert_allclose(G[i], nnet.input_gradient(m, X[i], y[i]), rtol=1e-12)


def test_train_separable_blobs():
    ds = data.synth_generate(1000, 5, 2, seed=0, separation=6.0, label_noise=0.0)
    m = nnet.train(ds, nnet.TrainConfig(seed=0))
    assert m.meta["train_accuracy"] >= 0.99


def test_train_is_deterministic():
    ds = data.synth_generate(300, 4, 3, seed=1)
    cfg = nnet.TrainConfig(epochs=3, hidden=(8,), seed=5)
    a, b = nnet.train(ds, cfg), nnet.train(ds, cfg)
    for Wa, Wb in zip(a.weights, b.weights):
        assert np.array_equal(Wa, Wb)


def test_train_rejects_zero_epochs():
    with pytest.raises(ValueError):
        nnet.TrainConfig(epochs=0)


def test_train_divergence_names_epoch():
    ds = data.synth_generate(300, 4, 3, seed=1)

    def exploding(model, Xb, yb, rng):
        loss, grads = nnet.plain_loss(model, Xb, yb, rng)
        return float("nan"), grads

    with pytest.raises(nnet.TrainingDiverged, match="epoch 1"):
        nnet.train(ds, nnet.TrainConfig(epochs=2, hidden=(4,)), loss_variant=exploding)


def test_model_roundtrip_bit_exact(tmp_path):
    m = random_model(np.random.default_rng(11), (4, 6, 3))
    nnet.save_model(m, tmp_path / "m.json")
    back = nnet.load_model(tmp_path / "m.json")
    for a, b in zip(m.weights + m.biases, back.weights + back.biases):
        assert np.array_equal(a, b)


def test_model_rejects_bad_params():
    with pytest.raises(ValueError):
        nnet.NeuralModel((np.full((2, 2), np.nan),), (np.zeros(2),))
    with pytest.raises(ValueError):
        nnet.NeuralModel((np.zeros((2, 3)), np.zeros((4, 2))), (np.zeros(3), np.zeros(2)))
