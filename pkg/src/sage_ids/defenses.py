"""The ten-entry defense portfolio behind a uniform ``defended_predict`` interface.

Eight entries are trained models (adversarial training variants, noise
augmentation, distillation); Feature Squeezing and Gaussian Noise wrap the
undefended base model with an input transform.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nnet
from .attacks import pgd_array, project
from .data import Dataset
from .nnet import NeuralModel, TrainConfig, log_softmax, softmax

logger = logging.getLogger(__name__)

SCHEMA_ID = "sage_ids.defense/1"


class DefenseId(IntEnum):
    """Portfolio members; the integer order is the tie-breaking order."""

    PGD_AT = 0
    IAT = 1
    TRADES = 2
    FAT = 3
    GA = 4
    DD = 5
    RSLAD10 = 6
    RSLAD100 = 7
    FS = 8
    GN = 9


PORTFOLIO = tuple(DefenseId)
TRANSFORM_ONLY = (DefenseId.FS, DefenseId.GN)


@dataclass(frozen=True)
class DefenseConfig:
    epsilon: float = 0.1
    steps: int = 10
    iat_beta: float = 1.0
    trades_beta: float = 6.0
    fat_replay: int = 4
    ga_sigma: float = 0.1
    dd_temperature: float = 20.0
    rslad_steps: tuple[int, int] = (10, 100)
    fs_bits: int = 8
    gn_sigma: float = 0.05
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def alpha(self) -> float:
        return 2.5 * self.epsilon / self.steps


@dataclass(frozen=True, eq=False)
class DefenseModel:
    id: DefenseId
    model: NeuralModel
    transform: dict | None = None
    hyper: dict = field(default_factory=dict)
    clean_accuracy: float | None = None


def quantize(x: np.ndarray, bits: int, lo, hi) -> np.ndarray:
    """Snap each coordinate to the nearest of ``2**bits`` even levels on [lo, hi]."""
    if not 1 <= bits <= 16:
        raise ValueError("bits must lie in [1, 16]")
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("hi must exceed lo componentwise")
    levels = 2**bits - 1
    t = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return lo + np.round(t * levels) / levels * (hi - lo)



def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def keyed_normals(seed: int, keys: np.ndarray, d: int) -> np.ndarray:
    """Standard normals that depend only on (seed, key, coordinate).

    A counter-based generator: any subset or ordering of keys reproduces the
    same noise row for the same key.
    """
    keys = np.asarray(keys, dtype=np.int64).astype(np.uint64)
    base = _splitmix64(_splitmix64(np.full(keys.shape, np.uint64(seed % 2**64))) ^ keys)
    j = np.arange(2 * d, dtype=np.uint64)
    h = _splitmix64(base[:, None] ^ _splitmix64(j)[None, :])
    u = (h >> np.uint64(11)).astype(np.float64) * 2.0**-53
    u1, u2 = u[:, :d], u[:, d:]
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def apply_transform(transform: dict | None, X: np.ndarray, keys: np.ndarray | None = None) -> np.ndarray:
    if transform is None:
        return X
    kind = transform["kind"]
    if kind == "quantize":
        return quantize(X, transform["bits"], transform["lo"], transform["hi"])
    if kind == "gaussian_noise":
        if transform["sigma"] == 0:
            return X
        keys = np.arange(len(X)) if keys is None else np.asarray(keys)
        return X + transform["sigma"] * keyed_normals(transform["seed"], keys, X.shape[1])
    raise ValueError(f"unknown transform {kind!r}")


def defended_predict(dm: DefenseModel, x: np.ndarray, keys=None) -> np.ndarray | int:
    """Predicted label(s) after the defense's transform.

    ``keys`` identify samples for keyed randomness (Gaussian Noise); pass
    the global sample ids so that every caller sees the same noise.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != dm.model.n_inputs:
        raise ValueError(f"input has {X.shape[1]} features, defense expects {dm.model.n_inputs}")
    if keys is not None:
        keys = np.atleast_1d(keys)
    pred = dm.model.predict(apply_transform(dm.transform, X, keys))
    return int(pred[0]) if single else pred


# -- training objectives ---------------------------------------------------


def _soft_targets_grad(model: NeuralModel, X, targets, temperature=1.0, scale=1.0):
    """Soft-label cross-entropy at a temperature: loss and param grads."""
    z, acts = model.forward_cache(X)
    n = len(X)
    lp = log_softmax(z, temperature)
    loss = -(targets * lp).sum() / n
    d = (np.exp(lp) - targets) / (temperature * n)
    gW, gb, _ = model.backward(acts, d * scale)
    return scale * loss, gW, gb


def _onehot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def _add(a, b):
    return [x + y for x, y in zip(a, b)]


def _kl_ascent(model, X, target, eps, steps, alpha, lo, hi, mask, rng):
    """Maximize KL(target || model(x')) over the eps-ball (TRADES / RSLAD inner loop)."""
    xa = project(X + 0.001 * rng.standard_normal(X.shape) * mask, X, eps, lo, hi)
    for _ in range(steps):
        z, acts = model.forward_cache(xa)
        g = model.backward(acts, softmax(z) - target, params=False)[2]
        xa = project(xa + alpha * np.sign(g) * mask, X, eps, lo, hi)
    return xa


class _Objectives:
    def __init__(self, cfg: DefenseConfig, ds: Dataset, mask):
        self.cfg = cfg
        self.lo, self.hi = ds.feature_lo, ds.feature_hi
        self.C = ds.class_count
        self.mask = mask

    def pgd(self, model, Xb, yb, rng, steps=None):
        c = self.cfg
        steps = steps or c.steps
        return pgd_array(model, Xb, yb, c.epsilon, steps, 2.5 * c.epsilon / steps, self.lo, self.hi, rng, self.mask)

    def pgd_at(self, model, Xb, yb, rng):
        return nnet.loss_and_param_grads(model, self.pgd(model, Xb, yb, rng), yb)

    def iat(self, model, Xb, yb, rng):
        lam = rng.beta(self.cfg.iat_beta, self.cfg.iat_beta)
        perm = rng.permutation(len(yb))
        Y = _onehot(yb, self.C)
        target = lam * Y + (1 - lam) * Y[perm]
        xa = self.pgd(model, Xb, yb, rng)
        l1, w1, b1 = _soft_targets_grad(model, lam * Xb + (1 - lam) * Xb[perm], target, scale=0.5)
        l2, w2, b2 = _soft_targets_grad(model, lam * xa + (1 - lam) * xa[perm], target, scale=0.5)
        return l1 + l2, (_add(w1, w2), _add(b1, b2))

    def trades(self, model, Xb, yb, rng):
        c = self.cfg
        n = len(yb)
        z_c, acts_c = model.forward_cache(Xb)
        p_c = softmax(z_c)
        xa = _kl_ascent(model, Xb, p_c, c.epsilon, c.steps, c.alpha, self.lo, self.hi, self.mask, rng)
        z_a, acts_a = model.forward_cache(xa)
        lp_c, lp_a = log_softmax(z_c), log_softmax(z_a)
        a = lp_c - lp_a
        kl = (p_c * a).sum() / n
        ce = -lp_c[np.arange(n), yb].mean()
        d_c = (p_c - _onehot(yb, self.C)) / n + c.trades_beta * p_c * (a - (p_c * a).sum(1, keepdims=True)) / n
        d_a = c.trades_beta * (np.exp(lp_a) - p_c) / n
        w1, b1, _ = model.backward(acts_c, d_c)
        w2, b2, _ = model.backward(acts_a, d_a)
        return ce + c.trades_beta * kl, (_add(w1, w2), _add(b1, b2))

    def gaussian_augment(self, model, Xb, yb, rng):
        noisy = Xb + self.cfg.ga_sigma * rng.standard_normal(Xb.shape)
        return nnet.loss_and_param_grads(model, np.vstack([Xb, noisy]), np.concatenate([yb, yb]))

    def tempered(self, model, Xb, yb, rng):
        T = self.cfg.dd_temperature
        loss, w, b = _soft_targets_grad(model, Xb, _onehot(yb, self.C), T)
        return loss, (w, b)

    def distill(self, teacher: NeuralModel):
        T = self.cfg.dd_temperature

        def hook(model, Xb, yb, rng):
            loss, w, b = _soft_targets_grad(model, Xb, teacher.predict_proba(Xb, T), T)
            return loss, (w, b)

        return hook

    def rslad(self, teacher: NeuralModel, steps: int):
        c = self.cfg

        def hook(model, Xb, yb, rng):
            t = teacher.predict_proba(Xb)
            xa = _kl_ascent(model, Xb, t, c.epsilon, steps, 2.5 * c.epsilon / steps, self.lo, self.hi, self.mask, rng)
            l1, w1, b1 = _soft_targets_grad(model, xa, t, scale=5 / 6)
            l2, w2, b2 = _soft_targets_grad(model, Xb, t, scale=1 / 6)
            return l1 + l2, (_add(w1, w2), _add(b1, b2))

        return hook


def _train_free(ds: Dataset, cfg: DefenseConfig, seed: int, mask) -> NeuralModel:
    """Free adversarial training: each mini-batch is replayed ``fat_replay`` times,
    and the backward pass that updates the weights also updates a persistent
    perturbation."""
    tc = cfg.train
    eps, m = cfg.epsilon, cfg.fat_replay
    rng = np.random.default_rng(seed)
    model = nnet.init_model((ds.n_features, *tc.hidden, ds.class_count), seed=int(rng.integers(2**31)))
    opt = nnet.Adam(model, tc)
    delta = np.zeros((tc.batch_size, ds.n_features))
    X, y = ds.X, ds.y
    for epoch in range(1, math.ceil(tc.epochs / m) + 1):
        order = rng.permutation(len(y))
        for start in range(0, len(y), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            Xb, yb = X[idx], y[idx]
            for _ in range(m):
                xa = project(Xb + delta[: len(idx)], Xb, eps, ds.feature_lo, ds.feature_hi)
                z, acts = model.forward_cache(xa)
                n = len(idx)
                d = softmax(z)
                loss = -np.log(np.maximum(d[np.arange(n), yb], 1e-300)).mean()
                if not np.isfinite(loss):
                    raise nnet.TrainingDiverged(f"loss became non-finite in epoch {epoch}")
                d[np.arange(n), yb] -= 1.0
                gW, gb, gx = model.backward(acts, d / n)
                delta[:n] = np.clip(xa - Xb + eps * np.sign(gx) * mask, -eps, eps)
                model = opt.step(model, (gW, gb))
    acc = float((model.predict(X) == y).mean())
    return model.with_params(model.weights, model.biases, train_accuracy=acc)


def _seed_for(seed: int, did: DefenseId) -> int:
    return int(np.random.SeedSequence([seed, 7919, int(did)]).generate_state(1)[0])


def train_defense(
    did: DefenseId | str,
    train_ds: Dataset,
    base: NeuralModel,
    cfg: DefenseConfig | None = None,
    seed: int = 0,
    teacher: NeuralModel | None = None,
    freeze_categorical: bool = False,
) -> DefenseModel:
    """Build one portfolio member.

    RSLAD students distill from ``teacher`` (a TRADES model); one is trained
    on the fly when not supplied.
    """
    did = DefenseId[did] if isinstance(did, str) else DefenseId(did)
    cfg = cfg or DefenseConfig()
    s = _seed_for(seed, did)
    tc = replace(cfg.train, seed=s)
    mask = train_ds.continuous_mask.astype(np.float64) if freeze_categorical else np.ones(train_ds.n_features)
    obj = _Objectives(cfg, train_ds, mask)
    hyper: dict = {"epsilon": cfg.epsilon}

    def fit(hook, init=None):
        return nnet.train_arrays(train_ds.X, train_ds.y, train_ds.class_count, tc, hook, init)

    if did is DefenseId.FS:
        transform = {"kind": "quantize", "bits": cfg.fs_bits, "lo": train_ds.feature_lo.tolist(), "hi": train_ds.feature_hi.tolist()}
        return DefenseModel(did, base, transform, {"bits": cfg.fs_bits})
    if did is DefenseId.GN:
        return DefenseModel(did, base, {"kind": "gaussian_noise", "sigma": cfg.gn_sigma, "seed": s}, {"sigma": cfg.gn_sigma})

    if did is DefenseId.PGD_AT:
        model = fit(obj.pgd_at)
        hyper["steps"] = cfg.steps
    elif did is DefenseId.IAT:
        model = fit(obj.iat)
        hyper["beta"] = cfg.iat_beta
    elif did is DefenseId.TRADES:
        model = fit(obj.trades)
        hyper["beta"] = cfg.trades_beta
    elif did is DefenseId.FAT:
        model = _train_free(train_ds, cfg, s, mask)
        hyper["replay"] = cfg.fat_replay
    elif did is DefenseId.GA:
        model = fit(obj.gaussian_augment)
        hyper["sigma"] = cfg.ga_sigma
    elif did is DefenseId.DD:
        t = fit(obj.tempered)
        model = fit(obj.distill(t))
        hyper["temperature"] = cfg.dd_temperature
    elif did in (DefenseId.RSLAD10, DefenseId.RSLAD100):
        if teacher is None:
            teacher = train_defense(DefenseId.TRADES, train_ds, base, cfg, seed, freeze_categorical=freeze_categorical).model
        steps = cfg.rslad_steps[0] if did is DefenseId.RSLAD10 else cfg.rslad_steps[1]
        model = fit(obj.rslad(teacher, steps))
        hyper["student_steps"] = steps
    else:  # pragma: no cover
        raise ValueError(f"unknown defense {did}")
    return DefenseModel(did, model, None, hyper)


def train_portfolio(
    train_ds: Dataset,
    base: NeuralModel,
    cfg: DefenseConfig | None = None,
    seed: int = 0,
    ids: Sequence[DefenseId] = PORTFOLIO,
    eval_ds: Dataset | None = None,
    workers: int = 1,
    freeze_categorical: bool = False,
) -> list[DefenseModel]:
    """Train every defense in ``ids`` (id order) and record clean accuracy on ``eval_ds``."""
    cfg = cfg or DefenseConfig()
    ids = sorted(DefenseId(i) for i in ids)
    teacher = None
    needs_teacher = any(i in (DefenseId.RSLAD10, DefenseId.RSLAD100) for i in ids)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        first = [i for i in ids if i is DefenseId.TRADES] if needs_teacher else []
        out = {}
        if first:
            out[DefenseId.TRADES] = train_defense(DefenseId.TRADES, train_ds, base, cfg, seed, freeze_categorical=freeze_categorical)
            teacher = out[DefenseId.TRADES].model
        elif needs_teacher:
            teacher = train_defense(DefenseId.TRADES, train_ds, base, cfg, seed, freeze_categorical=freeze_categorical).model
        rest = [i for i in ids if i not in out]
        with ProcessPoolExecutor(workers) as pool:
            futs = {i: pool.submit(train_defense, i, train_ds, base, cfg, seed, teacher, freeze_categorical) for i in rest}
            out.update({i: f.result() for i, f in futs.items()})
        portfolio = [out[i] for i in ids]
    else:
        portfolio = []
        for did in ids:
            if did in (DefenseId.RSLAD10, DefenseId.RSLAD100) and teacher is None:
                done = [d for d in portfolio if d.id is DefenseId.TRADES]
                teacher = done[0].model if done else train_defense(DefenseId.TRADES, train_ds, base, cfg, seed, freeze_categorical=freeze_categorical).model
            logger.info("training defense %s", did.name)
            portfolio.append(train_defense(did, train_ds, base, cfg, seed, teacher, freeze_categorical))
    if eval_ds is not None:
        portfolio = [
            replace(d, clean_accuracy=float((defended_predict(d, eval_ds.X, eval_ds.sample_ids) == eval_ds.y).mean()))
            for d in portfolio
        ]
    return portfolio


def defense_to_dict(dm: DefenseModel) -> dict:
    return {
        "schema": SCHEMA_ID,
        "id": dm.id.name,
        "model": nnet.model_to_dict(dm.model),
        "transform": dm.transform,
        "hyper": dm.hyper,
        "clean_accuracy": dm.clean_accuracy,
    }


def defense_from_dict(d: dict) -> DefenseModel:
    if d.get("schema") != SCHEMA_ID:
        raise ValueError(f"unknown defense schema {d.get('schema')!r}")
    return DefenseModel(DefenseId[d["id"]], nnet.model_from_dict(d["model"]), d["transform"], d["hyper"], d["clean_accuracy"])


def save_portfolio(portfolio: Sequence[DefenseModel], directory: str | Path) -> Path:
    """One JSON per defense plus ``registry.json`` mapping id -> file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    registry = {}
    for dm in portfolio:
        name = f"{dm.id.name}.json"
        (directory / name).write_text(json.dumps(defense_to_dict(dm)))
        registry[dm.id.name] = name
    path = directory / "registry.json"
    path.write_text(json.dumps(registry, indent=1))
    return path


def load_portfolio(directory: str | Path) -> list[DefenseModel]:
    directory = Path(directory)
    registry = json.loads((directory / "registry.json").read_text())
    out = [defense_from_dict(json.loads((directory / f).read_text())) for f in registry.values()]
    return sorted(out, key=lambda d: d.id)
