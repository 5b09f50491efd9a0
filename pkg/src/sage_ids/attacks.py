"""L-infinity evasion attacks on tabular feature vectors.

All attacks are batched over samples and talk to the victim only through
``predict_proba``, ``input_gradients`` and ``logit_jacobian``; ZOO uses
``predict_proba`` alone. Every output is projected onto the intersection of
the epsilon-ball around the clean sample and the dataset's feature box, and
the ball constraint ``|x_adv - x| <= eps`` holds exactly in floating point.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset

TRAIN_EPSILON = 0.1
EPSILON_GRID = (0.01, 0.1, 0.2, 0.3)


class AttackKind(str, Enum):
    FGSM = "FGSM"
    BIM = "BIM"
    PGD = "PGD"
    DF = "DF"
    ZOO = "ZOO"
    SINIFGSM = "SINIFGSM"
    VNIFGSM = "VNIFGSM"


ALL_KINDS = tuple(AttackKind)

DEFAULT_EXTRAS = {
    AttackKind.PGD: {"random_start": True},
    AttackKind.DF: {"overshoot": 0.02, "max_iters": 50},
    AttackKind.ZOO: {"fd_step": 1e-4, "coords_per_step": 16},
    AttackKind.SINIFGSM: {"decay": 1.0, "m_scales": 5},
    AttackKind.VNIFGSM: {"decay": 1.0, "n_neighbors": 5, "beta": 1.5},
}


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        merged = {**DEFAULT_EXTRAS.get(self.kind, {}), **self.extras}
        object.__setattr__(self, "extras", merged)

    @property
    def alpha(self) -> float:
        return 2.5 * self.epsilon / self.steps if self.step_size is None else self.step_size

    @property
    def key(self) -> int:
        """Stable 32-bit id of the (kind, epsilon) pair, used to derive seeds."""
        return zlib.crc32(f"{self.kind.value}:{self.epsilon!r}".encode())


@dataclass(frozen=True, eq=False)
class AdvDataset:
    base: Dataset
    X_adv: np.ndarray
    spec: AttackSpec
    seeds: np.ndarray
    role: str = "attack-test"

    def __post_init__(self):
        if self.X_adv.shape != self.base.X.shape:
            raise ValueError("adversarial matrix must match the base dataset shape")
        self.X_adv.setflags(write=False)

    @property
    def attack(self) -> str:
        return self.spec.kind.value

    @property
    def epsilon(self) -> float:
        return self.spec.epsilon

    @property
    def y(self) -> np.ndarray:
        return self.base.y

    @property
    def sample_ids(self) -> np.ndarray:
        return self.base.sample_ids

    def __len__(self) -> int:
        return len(self.base.y)

    def subset(self, index: np.ndarray) -> "AdvDataset":
        return AdvDataset(self.base.subset(index), self.X_adv[index], self.spec, self.seeds[index], self.role)


def sample_seeds(global_seed: int, dataset_key: int, sample_ids: Iterable[int]) -> np.ndarray:
    """Per-sample seeds; independent of batch layout, so serial and parallel runs agree."""
    return np.array(
        [np.random.SeedSequence([global_seed, dataset_key, int(i)]).generate_state(1, np.uint64)[0] for i in sample_ids],
        dtype=np.uint64,
    )


def project(x_adv: np.ndarray, x: np.ndarray, eps: float, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Clip onto ball ∩ box so that ``abs(out - x) <= eps`` holds exactly."""
    out = np.clip(np.clip(x_adv, x - eps, x + eps), lo, hi)
    # x +/- eps can round one ulp past the ball
    for _ in range(4):
        bad = np.abs(out - x) > eps
        if not bad.any():
            break
        out[bad] = np.nextafter(out[bad], x[bad])
    return out


def _mask(ds: Dataset, freeze_categorical: bool) -> np.ndarray:
    if freeze_categorical:
        return ds.continuous_mask.astype(np.float64)
    return np.ones(ds.n_features)


def _l1_normalize(g: np.ndarray) -> np.ndarray:
    norm = np.abs(g).sum(axis=1, keepdims=True)
    return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)


def fgsm_array(m, X, y, eps, lo, hi, mask=1.0) -> np.ndarray:
    if eps == 0:
        return X.copy()
    g = m.input_gradients(X, y)
    return project(X + eps * np.sign(g) * mask, X, eps, lo, hi)


def bim_array(m, X, y, eps, steps, alpha, lo, hi, mask=1.0, start=None) -> np.ndarray:
    if eps == 0:
        return X.copy()
    xa = X.copy() if start is None else project(start, X, eps, lo, hi)
    for _ in range(steps):
        g = m.input_gradients(xa, y)
        xa = project(xa + alpha * np.sign(g) * mask, X, eps, lo, hi)
    return xa


def pgd_array(m, X, y, eps, steps, alpha, lo, hi, rng_or_noise, mask=1.0) -> np.ndarray:
    """PGD with a uniform random start; ``rng_or_noise`` is a Generator or a ready (n, d) start offset."""
    if isinstance(rng_or_noise, np.random.Generator):
        noise = rng_or_noise.uniform(-eps, eps, size=X.shape)
    else:
        noise = rng_or_noise
    return bim_array(m, X, y, eps, steps, alpha, lo, hi, mask, start=X + noise * mask)


def deepfool_array(m, X, y, eps, max_iters, overshoot, lo, hi, mask=1.0) -> np.ndarray:
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    k0 = m.predict_proba(X).argmax(axis=1)
    active = k0 == np.asarray(y)
    r_tot = np.zeros_like(X)
    rows = np.arange(len(X))
    for _ in range(max_iters):
        idx = rows[active]
        if not len(idx):
            break
        xi = X[idx] + (1 + overshoot) * r_tot[idx]
        z = np.log(np.maximum(m.predict_proba(xi), 1e-300))
        still = z.argmax(axis=1) == k0[idx]
        active[idx[~still]] = False
        idx, xi, z = idx[still], xi[still], z[still]
        if not len(idx):
            break
        J = m.logit_jacobian(xi) * mask
        own = k0[idx]
        f = z - z[np.arange(len(idx)), own][:, None]
        w = J - J[np.arange(len(idx)), own][:, None, :]
        wn = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f) / wn
        ratio[np.arange(len(idx)), own] = np.inf
        ratio[~np.isfinite(ratio)] = np.inf
        best = ratio.argmin(axis=1)
        ok = np.isfinite(ratio[np.arange(len(idx)), best])
        active[idx[~ok]] = False
        sel = np.arange(len(idx))[ok]
        wl = w[sel, best[ok]]
        step = (np.abs(f[sel, best[ok]]) / (wn[sel, best[ok]] ** 2))[:, None] * wl
        r_tot[idx[ok]] += step
    if eps == 0:
        return X.copy()
    return project(X + (1 + overshoot) * r_tot, X, eps, lo, hi)


def _margin_loss(p: np.ndarray, y: np.ndarray, kappa: float = 0.0) -> np.ndarray:
    """Untargeted ZOO objective: log p_y - max_{k != y} log p_k, floored at -kappa."""
    lp = np.log(np.maximum(p, 1e-300))
    own = lp[np.arange(len(y)), y]
    lp = lp.copy()
    lp[np.arange(len(y)), y] = -np.inf
    return np.maximum(own - lp.max(axis=1), -kappa)


def zoo_coordinate_gradient(m, X, y, coords, h) -> np.ndarray:
    """Symmetric-difference estimate of the margin loss along ``coords`` (n, k)."""
    n, k = coords.shape
    d = X.shape[1]
    E = np.zeros((n, k, d))
    E[np.arange(n)[:, None], np.arange(k)[None, :], coords] = h
    probe = np.concatenate([X[:, None, :] + E, X[:, None, :] - E], axis=1).reshape(-1, d)
    yy = np.repeat(np.asarray(y), 2 * k)
    f = _margin_loss(m.predict_proba(probe), yy).reshape(n, 2 * k)
    return (f[:, :k] - f[:, k:]) / (2 * h)


def zoo_array(m, X, y, eps, steps, alpha, h, coords_per_step, lo, hi, rngs, mask=None) -> np.ndarray:
    if eps == 0:
        return X.copy()
    d = X.shape[1]
    free = np.arange(d) if mask is None else np.flatnonzero(np.broadcast_to(mask, (d,)))
    k = min(coords_per_step, len(free))
    plans = np.stack([[free[r.permutation(len(free))[:k]] for _ in range(steps)] for r in rngs]) if len(X) else np.empty((0, steps, k), int)
    xa = X.copy()
    y = np.asarray(y)
    rows = np.arange(len(X))[:, None]
    for t in range(steps):
        coords = plans[:, t, :]
        g = zoo_coordinate_gradient(m, xa, y, coords, h)
        step = np.zeros_like(xa)
        step[rows, coords] = -alpha * np.sign(g)
        xa = project(xa + step, X, eps, lo, hi)
    return xa


def momentum_update(g: np.ndarray, grad: np.ndarray, decay: float) -> np.ndarray:
    return decay * g + _l1_normalize(grad)


def sini_fgsm_array(m, X, y, eps, steps, alpha, decay, m_scales, lo, hi, mask=1.0, lookahead=True) -> np.ndarray:
    if m_scales < 1:
        raise ValueError("m_scales must be >= 1")
    if eps == 0:
        return X.copy()
    xa = X.copy()
    g = np.zeros_like(X)
    for _ in range(steps):
        x_nes = xa + alpha * decay * g if lookahead else xa
        grad = np.zeros_like(X)
        for i in range(m_scales):
            s = 2.0**i
            grad += m.input_gradients(x_nes / s, y) / s
        grad /= m_scales
        g = momentum_update(g, grad, decay)
        xa = project(xa + alpha * np.sign(g) * mask, X, eps, lo, hi)
    return xa


def vni_fgsm_array(m, X, y, eps, steps, alpha, decay, n_neighbors, beta, lo, hi, neighborhoods, mask=1.0) -> np.ndarray:
    """``neighborhoods``: offsets of shape (n, steps, N, d) drawn from U(-beta*eps, beta*eps)."""
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    if eps == 0:
        return X.copy()
    xa = X.copy()
    g = np.zeros_like(X)
    v = np.zeros_like(X)
    for t in range(steps):
        x_nes = xa + alpha * decay * g
        grad = m.input_gradients(x_nes, y)
        g = momentum_update(g, grad + v, decay)
        nb = np.zeros_like(X)
        for j in range(n_neighbors):
            nb += m.input_gradients(x_nes + neighborhoods[:, t, j, :] * mask, y)
        v = nb / n_neighbors - grad
        xa = project(xa + alpha * np.sign(g) * mask, X, eps, lo, hi)
    return xa


def neighborhood_offsets(rngs: Sequence[np.random.Generator], radius: float, steps: int, n: int, d: int) -> np.ndarray:
    if not len(rngs):
        return np.empty((0, steps, n, d))
    return np.stack([r.uniform(-radius, radius, size=(steps, n, d)) for r in rngs])


def run_attack(m, ds: Dataset, spec: AttackSpec, seed: int = 0, freeze_categorical: bool = False, role: str = "attack-test") -> AdvDataset:
    """Attack every row of ``ds`` under ``spec``; same row count as ``ds``."""
    X, y = ds.X, ds.y
    lo, hi = ds.feature_lo, ds.feature_hi
    mask = _mask(ds, freeze_categorical)
    eps, steps, alpha, ex = spec.epsilon, spec.steps, spec.alpha, spec.extras
    seeds = sample_seeds(seed, spec.key, ds.sample_ids)
    kind = spec.kind
    if kind is AttackKind.FGSM:
        Xa = fgsm_array(m, X, y, eps, lo, hi, mask)
    elif kind is AttackKind.BIM:
        Xa = bim_array(m, X, y, eps, steps, alpha, lo, hi, mask)
    elif kind is AttackKind.PGD:
        if ex["random_start"]:
            noise = np.stack([np.random.default_rng(s).uniform(-eps, eps, ds.n_features) for s in seeds]) if len(seeds) else np.zeros_like(X)
        else:
            noise = np.zeros_like(X)
        Xa = bim_array(m, X, y, eps, steps, alpha, lo, hi, mask, start=X + noise * mask) if eps else X.copy()
    elif kind is AttackKind.DF:
        Xa = deepfool_array(m, X, y, eps, ex["max_iters"], ex["overshoot"], lo, hi, mask)
    elif kind is AttackKind.ZOO:
        rngs = [np.random.default_rng(s) for s in seeds]
        k = min(ex["coords_per_step"], ds.n_features)
        Xa = zoo_array(m, X, y, eps, steps, alpha, ex["fd_step"], k, lo, hi, rngs, mask)
    elif kind is AttackKind.SINIFGSM:
        Xa = sini_fgsm_array(m, X, y, eps, steps, alpha, ex["decay"], ex["m_scales"], lo, hi, mask)
    elif kind is AttackKind.VNIFGSM:
        rngs = [np.random.default_rng(s) for s in seeds]
        nbr = neighborhood_offsets(rngs, ex["beta"] * eps, steps, ex["n_neighbors"], ds.n_features)
        Xa = vni_fgsm_array(m, X, y, eps, steps, alpha, ex["decay"], ex["n_neighbors"], ex["beta"], lo, hi, nbr, mask)
    else:  # pragma: no cover
        raise ValueError(f"unknown attack kind {kind}")
    return AdvDataset(ds, Xa, spec, seeds, role)


def fgsm(m, ds: Dataset, eps: float, **kw) -> AdvDataset:
    return run_attack(m, ds, AttackSpec(AttackKind.FGSM, eps, steps=1), **kw)


def bim(m, ds: Dataset, eps: float, steps: int = 10, alpha: float | None = None, **kw) -> AdvDataset:
    if alpha is not None and alpha <= 0:
        raise ValueError("alpha must be > 0")
    return run_attack(m, ds, AttackSpec(AttackKind.BIM, eps, steps, alpha), **kw)


def pgd(m, ds: Dataset, eps: float, steps: int = 10, alpha: float | None = None, random_start: bool = True, **kw) -> AdvDataset:
    return run_attack(m, ds, AttackSpec(AttackKind.PGD, eps, steps, alpha, {"random_start": random_start}), **kw)


def deepfool(m, ds: Dataset, eps: float, max_iters: int = 50, overshoot: float = 0.02, **kw) -> AdvDataset:
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    return run_attack(m, ds, AttackSpec(AttackKind.DF, eps, extras={"max_iters": max_iters, "overshoot": overshoot}), **kw)


def zoo(m, ds: Dataset, eps: float, steps: int = 10, fd_step: float = 1e-4, coords_per_step: int = 16, **kw) -> AdvDataset:
    return run_attack(m, ds, AttackSpec(AttackKind.ZOO, eps, steps, extras={"fd_step": fd_step, "coords_per_step": coords_per_step}), **kw)


def sini_fgsm(m, ds: Dataset, eps: float, steps: int = 10, decay: float = 1.0, m_scales: int = 5, **kw) -> AdvDataset:
    if m_scales < 1:
        raise ValueError("m_scales must be >= 1")
    return run_attack(m, ds, AttackSpec(AttackKind.SINIFGSM, eps, steps, extras={"decay": decay, "m_scales": m_scales}), **kw)


def vni_fgsm(m, ds: Dataset, eps: float, steps: int = 10, decay: float = 1.0, n_neighbors: int = 5, beta: float = 1.5, **kw) -> AdvDataset:
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    return run_attack(
        m, ds, AttackSpec(AttackKind.VNIFGSM, eps, steps, extras={"decay": decay, "n_neighbors": n_neighbors, "beta": beta}), **kw
    )


def generate_suite(
    m,
    test_ds: Dataset,
    kinds: Sequence[str | AttackKind] = ALL_KINDS,
    eps_grid: Sequence[float] = EPSILON_GRID,
    seed: int = 0,
    train_epsilon: float = TRAIN_EPSILON,
    steps: int = 10,
    extras: dict | None = None,
    freeze_categorical: bool = False,
) -> list[AdvDataset]:
    """One adversarial copy of ``test_ds`` per (kind, epsilon).

    Datasets at ``train_epsilon`` are flagged ``attack-train``; the rest are
    ``attack-test``.
    """
    if not kinds or not eps_grid:
        raise ValueError("kinds and eps_grid must be non-empty")
    try:
        kinds = [AttackKind(k) for k in kinds]
    except ValueError as exc:
        raise ValueError(f"unknown attack kind: {exc}") from None
    extras = extras or {}
    suite = []
    for kind in kinds:
        for eps in eps_grid:
            spec = AttackSpec(kind, float(eps), steps, extras=extras.get(kind.value, {}))
            role = "attack-train" if np.isclose(eps, train_epsilon) else "attack-test"
            suite.append(run_attack(m, test_ds, spec, seed, freeze_categorical, role))
    return suite


def save_adv_csv(adv: AdvDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "attack", "epsilon", *adv.base.feature_names, "true_label"])
        for sid, row, label in zip(adv.sample_ids, adv.X_adv, adv.y):
            w.writerow([int(sid), adv.attack, repr(adv.epsilon), *(repr(float(v)) for v in row), int(label)])


def load_adv_csv(path: str | Path, base: Dataset, spec: AttackSpec, seeds: np.ndarray | None = None, role: str = "attack-test") -> AdvDataset:
    """Rebuild an :class:`AdvDataset` from its CSV and the clean dataset it came from."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = list(r)
    ids = np.array([int(row[0]) for row in rows], dtype=np.int64)
    if not np.array_equal(ids, base.sample_ids):
        raise ValueError(f"{path}: sample ids do not match the base dataset")
    Xa = np.array([[float(v) for v in row[3:-1]] for row in rows], dtype=np.float64).reshape(len(rows), base.n_features)
    if seeds is None:
        seeds = sample_seeds(0, spec.key, ids)
    return AdvDataset(base, Xa, spec, seeds, role)
