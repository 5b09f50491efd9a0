from __future__ import annotations

import numpy as np
import pytest

from sage_ids import attacks, data, defenses, nnet


@pytest.fixture(scope="session")
def small_data():
    ds = data.synth_generate(600, 6, 3, imbalance=(0.5, 0.3, 0.2), seed=3, separation=3.0)
    return data.split(ds, data.SplitSpec(0.75, 3))


@pytest.fixture(scope="session")
def small_model(small_data):
    train, _ = small_data
    return nnet.train(train, nnet.TrainConfig(epochs=15, hidden=(16, 8), seed=1))


@pytest.fixture(scope="session")
def small_portfolio(small_data, small_model):
    train, test = small_data
    cfg = defenses.DefenseConfig(steps=3, rslad_steps=(2, 4), train=nnet.TrainConfig(epochs=4, hidden=(16, 8), seed=2))
    return defenses.train_portfolio(train, small_model, cfg, seed=5, eval_ds=test)


@pytest.fixture(scope="session")
def small_suite(small_data, small_model):
    _, test = small_data
    return attacks.generate_suite(small_model, test, seed=7, steps=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(rng: np.random.Generator, arch=(4, 5, 3), scale=1.0) -> nnet.NeuralModel:
    W = tuple(rng.normal(scale=scale, size=(a, b)) for a, b in zip(arch, arch[1:]))
    b = tuple(rng.normal(scale=0.1 * scale, size=n) for n in arch[1:])
    return nnet.NeuralModel(W, b)
