"""Feed-forward ReLU/softmax classifier in float64 numpy.

The model is the baseline intrusion detector and the differentiable
substrate for white-box attacks and adversarial-training defenses, so it
exposes gradients with respect to both parameters and inputs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_ID = "sage_ids.nnet/1"
DEFAULT_HIDDEN = (64, 32)


class TrainingDiverged(RuntimeError):
    pass


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class NeuralModel:
    """Parameters of a ReLU network; ``weights[i]`` has shape (in, out)."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {W.shape}")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input width {W.shape[0]} != {self.weights[i - 1].shape[1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def arch(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_inputs:
            raise ValueError(f"input has {X.shape[1]} features, model expects {self.n_inputs}")
        return X

    def logits(self, X: np.ndarray) -> np.ndarray:
        h = self._check(X)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def predict_proba(self, X: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.logits(X), temperature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.logits(X).argmax(axis=1)

    def forward_cache(self, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Logits plus the per-layer inputs needed by :meth:`backward`."""
        h = self._check(X)
        acts = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
                acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dlogits: np.ndarray, params: bool = True):
        """Back-propagate ``dlogits``; returns (weight grads, bias grads, input grad)."""
        gW: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        g = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            if params:
                gW[i] = acts[i].T @ g
                gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0.0)
        return gW, gb, g

    def input_gradients(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Row-wise gradient of each sample's own cross-entropy w.r.t. its input."""
        z, acts = self.forward_cache(X)
        d = softmax(z)
        d[np.arange(len(d)), np.asarray(y)] -= 1.0
        return self.backward(acts, d, params=False)[2]

    def logit_jacobian(self, X: np.ndarray) -> np.ndarray:
        """Gradient of every logit w.r.t. the input, shape (n, C, d)."""
        z, acts = self.forward_cache(X)
        n, C = z.shape
        out = np.empty((n, C, self.n_inputs))
        for k in range(C):
            e = np.zeros_like(z)
            e[:, k] = 1.0
            out[:, k] = self.backward(acts, e, params=False)[2]
        return out

    def with_params(self, weights, biases, **meta) -> "NeuralModel":
        return NeuralModel(tuple(weights), tuple(biases), {**self.meta, **meta})


def init_model(arch: Sequence[int], seed: int = 0) -> NeuralModel:
    """He-uniform initialization for ``arch = (inputs, hidden..., classes)``."""
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        lim = np.sqrt(6.0 / fan_in)
        Ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return NeuralModel(tuple(Ws), tuple(bs), {"arch": list(arch)})


def forward(m: NeuralModel, X: np.ndarray) -> np.ndarray:
    return m.predict_proba(X)


def cross_entropy(m: NeuralModel, X: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y)
    lp = log_softmax(m.logits(X))
    return float(-lp[np.arange(len(y)), y].mean())


def loss_and_param_grads(m: NeuralModel, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient as ``(weight grads, bias grads)``."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= m.n_classes:
        raise ValueError("labels out of range")
    z, acts = m.forward_cache(X)
    lp = log_softmax(z)
    n = len(y)
    loss = -lp[np.arange(n), y].mean()
    d = np.exp(lp)
    d[np.arange(n), y] -= 1.0
    gW, gb, _ = m.backward(acts, d / n)
    return float(loss), (gW, gb)


def input_gradient(m: NeuralModel, x: np.ndarray, y: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a vector")
    return m.input_gradients(x[None, :], np.array([y]))[0]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# (model, X batch, y batch, rng) -> (loss, (weight grads, bias grads))
LossHook = Callable[[NeuralModel, np.ndarray, np.ndarray, np.random.Generator], tuple]


def plain_loss(m: NeuralModel, Xb: np.ndarray, yb: np.ndarray, rng: np.random.Generator):
    return loss_and_param_grads(m, Xb, yb)


class Adam:
    def __init__(self, model: NeuralModel, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in (*model.weights, *model.biases)]
        self.v = [np.zeros_like(p) for p in (*model.weights, *model.biases)]

    def step(self, model: NeuralModel, grads) -> NeuralModel:
        c = self.cfg
        self.t += 1
        params = [*model.weights, *model.biases]
        flat = [*grads[0], *grads[1]]
        out = []
        for i, (p, g) in enumerate(zip(params, flat)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mhat = self.m[i] / (1 - c.beta1**self.t)
            vhat = self.v[i] / (1 - c.beta2**self.t)
            out.append(p - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps_opt))
        k = len(model.weights)
        return NeuralModel(tuple(out[:k]), tuple(out[k:]), model.meta)


def train_arrays(
    X: np.ndarray,
    y: np.ndarray,
    n_classes: int,
    cfg: TrainConfig,
    loss_variant: LossHook | None = None,
    init: NeuralModel | None = None,
    epochs: int | None = None,
) -> NeuralModel:
    """Mini-batch Adam training; bit-reproducible for a fixed ``cfg.seed``.

    ``loss_variant`` swaps the plain cross-entropy for a defense objective.
    """
    hook = loss_variant or plain_loss
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    model = init or init_model((X.shape[1], *cfg.hidden, n_classes), seed=int(rng.integers(2**31)))
    opt = Adam(model, cfg)
    n = len(y)
    for epoch in range(1, (epochs or cfg.epochs) + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = hook(model, X[idx], y[idx], rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}")
            total += loss * len(idx)
            try:
                model = opt.step(model, grads)
            except ValueError as exc:
                raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}") from exc
        logger.debug("epoch %d loss %.5f", epoch, total / n)
    acc = float((model.predict(X) == y).mean())
    return model.with_params(model.weights, model.biases, train_accuracy=acc)


def train(ds, cfg: TrainConfig, loss_variant: LossHook | None = None) -> NeuralModel:
    """Train a fresh model on a :class:`~sage_ids.data.Dataset`."""
    return train_arrays(ds.X, ds.y, ds.class_count, cfg, loss_variant)


def model_to_dict(m: NeuralModel) -> dict:
    return {
        "schema": SCHEMA_ID,
        "arch": list(m.arch),
        "weights": [W.ravel().tolist() for W in m.weights],
        "biases": [b.tolist() for b in m.biases],
        "meta": m.meta,
    }


def model_from_dict(d: dict) -> NeuralModel:
    if d.get("schema") != SCHEMA_ID:
        raise ValueError(f"unknown model schema {d.get('schema')!r}")
    arch = d["arch"]
    Ws = tuple(np.array(w, dtype=np.float64).reshape(a, b) for w, a, b in zip(d["weights"], arch[:-1], arch[1:]))
    bs = tuple(np.array(b, dtype=np.float64) for b in d["biases"])
    return NeuralModel(Ws, bs, dict(d.get("meta", {})))


def save_model(m: NeuralModel, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(model_to_dict(m)))


def load_model(path: str | Path) -> NeuralModel:
    return model_from_dict(json.loads(Path(path).read_text()))
