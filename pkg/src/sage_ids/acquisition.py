"""Entropic open-set active learning over the attack-training pool.

Each round a first-level forest is fit on the labeled rows; unlabeled rows
are scored by closed-set uncertainty (mean one-vs-rest binary entropy of
the forest posteriors) minus open-set scatter (normalized entropy of a
temperature-softened assignment to k-means centers), and a diverse batch is
taken from the top of the ranking by farthest-first traversal.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import selector
from .data import stratified_indices

logger = logging.getLogger(__name__)

STRATEGIES = ("eoal", "uncertainty", "density_weighted", "batch_mode", "stratified_random")


@dataclass(frozen=True)
class AcquisitionConfig:
    K: int = 10
    temperature: float = 1.0
    init_fraction: float = 0.10
    budgets: tuple[float, ...] = (0.01, 0.10, 0.20, 0.50)
    round_fraction: float = 0.05
    shortlist_factor: int = 5
    direction: str = "largest"
    working_set: int = 2000
    first_level_trees: int = 100
    first_level_depth: int | None = 16
    seed: int = 0

    def __post_init__(self):
        b = tuple(float(x) for x in self.budgets)
        object.__setattr__(self, "budgets", b)
        if not b or any(x <= 0 for x in b) or any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("budgets must be positive and strictly increasing")
        # 1.0 is accepted as the full-supervision reference point
        if any(x > 0.5 and x != 1.0 for x in b):
            raise ValueError("label budgets are capped at 50% of the pool")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.direction not in ("largest", "smallest"):
            raise ValueError("direction must be 'largest' or 'smallest'")


@dataclass(frozen=True)
class AcquisitionScore:
    s_c: np.ndarray
    s_d: np.ndarray

    @property
    def s(self) -> np.ndarray:
        return self.s_c - self.s_d


@dataclass
class AcquisitionResult:
    subsets: dict[float, np.ndarray]
    trace: list[dict] = field(default_factory=list)


def binary_entropy(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0) - np.where(q > 0, q * np.log2(q), 0.0)
    return h


def closed_entropy(P: np.ndarray) -> np.ndarray:
    """Mean base-2 binary entropy of one-vs-rest posteriors, per row."""
    P = np.asarray(P, dtype=np.float64)
    if np.any((P < 0) | (P > 1)) or np.any(np.isnan(P)):
        raise ValueError("posteriors must lie in [0, 1]")
    P2 = np.atleast_2d(P)
    out = np.clip(binary_entropy(P2).mean(axis=1), 0.0, 1.0)
    return out[0] if P.ndim == 1 else out


def soft_assignment(F: np.ndarray, centers: np.ndarray, T: float) -> np.ndarray:
    if T <= 0:
        raise ValueError("temperature must be > 0")
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    dist = np.linalg.norm(F[:, None, :] - centers[None, :, :], axis=2)
    return distance_softmax(dist, T)


def distance_softmax(dist: np.ndarray, T: float) -> np.ndarray:
    z = -dist / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def open_entropy(F: np.ndarray, centers: np.ndarray, T: float) -> np.ndarray:
    """Entropy of the soft center assignment, normalized by log K."""
    K = len(centers)
    if K < 2:
        raise ValueError("open-set entropy needs at least 2 centers")
    q = soft_assignment(F, centers, T)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(q > 0, q * np.log(q), 0.0).sum(axis=1) / math.log(K)
    out = np.clip(h, 0.0, 1.0)
    return out[0] if np.ndim(F) == 1 else out


def kmeans(F: np.ndarray, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Lloyd's algorithm from greedy farthest-point seeding.

    Returns ``(centers, assignment, inertia)``. An emptied cluster is moved
    onto the point farthest from its current center.
    """
    F = np.asarray(F, dtype=np.float64)
    n = len(F)
    if n < K:
        raise ValueError(f"working set of {n} rows is smaller than K={K}")
    rng = np.random.default_rng(seed)
    picks = [int(rng.integers(n))]
    d2 = ((F - F[picks[0]]) ** 2).sum(axis=1)
    for _ in range(K - 1):
        j = int(d2.argmax())
        picks.append(j)
        d2 = np.minimum(d2, ((F - F[j]) ** 2).sum(axis=1))
    centers = F[picks].copy()
    prev = np.inf
    for _ in range(max_iter):
        D = ((F[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = D.argmin(axis=1)
        own = D[np.arange(n), assign]
        inertia = own.sum()
        counts = np.bincount(assign, minlength=K)
        for k in np.flatnonzero(counts == 0):
            far = int(own.argmax())
            centers[k] = F[far]
            assign[far] = k
            own[far] = 0.0
        for k in range(K):
            members = assign == k
            if members.any():
                centers[k] = F[members].mean(axis=0)
        if prev < np.inf and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    D = ((F[:, None, :] - centers[None]) ** 2).sum(axis=2)
    assign = D.argmin(axis=1)
    return centers, assign, float(D[np.arange(n), assign].sum())


def cluster_centers(F: np.ndarray, K: int, seed: int = 0) -> np.ndarray:
    return kmeans(F, K, seed)[0]


def acquisition_score(posteriors: np.ndarray, F: np.ndarray, centers: np.ndarray, T: float) -> AcquisitionScore:
    return AcquisitionScore(closed_entropy(posteriors), open_entropy(F, centers, T))


def select_batch(scores: np.ndarray, quota: int, features: np.ndarray, shortlist_factor: int = 5) -> np.ndarray:
    """Farthest-first batch from the top ``shortlist_factor * quota`` candidates.

    The first pick is the best-scoring candidate; each later pick maximizes
    its minimum Euclidean distance to the picks so far (ties go to the
    better-scored candidate). Returns candidate indices in pick order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if quota < 1:
        raise ValueError("quota must be >= 1")
    if len(scores) == 0:
        raise ValueError("no candidates to select from")
    order = np.argsort(-scores, kind="stable")
    short = order[: shortlist_factor * quota]
    if quota >= len(short):
        return short.copy()
    Fs = np.asarray(features, dtype=np.float64)[short]
    mind = np.linalg.norm(Fs - Fs[0], axis=1)
    taken = np.zeros(len(short), dtype=bool)
    taken[0] = True
    picks = [0]
    for _ in range(quota - 1):
        cand = np.where(taken, -np.inf, mind)
        j = int(cand.argmax())
        picks.append(j)
        taken[j] = True
        mind = np.minimum(mind, np.linalg.norm(Fs - Fs[j], axis=1))
    return short[picks]


# -- acquisition loops ------------------------------------------------------

# scorer(first-level forest or None, unlabeled rows, unlabeled index, rng) -> (score, s_c, s_d)
Scorer = Callable[..., tuple]


def _first_level(X, labels, cfg: AcquisitionConfig, seed: int):
    if len(np.unique(labels)) < 2 or len(labels) < 10:
        return None
    return selector.fit(X, labels, n_trees=cfg.first_level_trees, max_depth=cfg.first_level_depth, seed=seed)


def _posteriors(forest, X, labels, K):
    if forest is None:
        # degenerate labeled set: every row gets the single observed class
        P = np.zeros((len(X), K))
        P[:, int(np.bincount(labels).argmax()) if len(labels) else 0] = 1.0
        return P
    return forest.predict_posteriors(X)


def _eoal_scorer(cfg: AcquisitionConfig):
    def score(forest, X_unl, labels_l, rng):
        P = _posteriors(forest, X_unl, labels_l, cfg.K)
        work = X_unl if len(X_unl) <= cfg.working_set else X_unl[rng.choice(len(X_unl), cfg.working_set, replace=False)]
        k = min(cfg.K, len(work))
        centers = cluster_centers(work, k, seed=int(rng.integers(2**31))) if k >= 2 else work[:1]
        sc = closed_entropy(P)
        sd = open_entropy(X_unl, centers, cfg.temperature) if k >= 2 else np.zeros(len(X_unl))
        s = sc - sd if cfg.direction == "largest" else sd - sc
        return s, sc, sd

    return score


def predictive_entropy(P: np.ndarray) -> np.ndarray:
    K = P.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(P > 0, P * np.log(P), 0.0).sum(axis=1) / math.log(K)


def _entropy_scorer(cfg: AcquisitionConfig):
    def score(forest, X_unl, labels_l, rng):
        h = predictive_entropy(_posteriors(forest, X_unl, labels_l, cfg.K))
        return h, h, np.zeros_like(h)

    return score


def _density_scorer(cfg: AcquisitionConfig, X_pool: np.ndarray):
    norms = np.linalg.norm(X_pool, axis=1, keepdims=True)
    unit = np.divide(X_pool, norms, out=np.zeros_like(X_pool), where=norms > 0)
    mean_unit = unit.mean(axis=0)

    def score(forest, X_unl, labels_l, rng):
        h = predictive_entropy(_posteriors(forest, X_unl, labels_l, cfg.K))
        nu = np.linalg.norm(X_unl, axis=1)
        cos = np.divide(X_unl @ mean_unit, nu, out=np.zeros(len(X_unl)), where=nu > 0)
        return h * cos, h, cos

    return score


def _run_trajectory(X, labels, warm, targets, cfg, scorer, diverse, rng, trace, budget_of):
    """Grow ``warm`` by scored batches, snapshotting at every target size."""
    n = len(labels)
    labeled = np.zeros(n, dtype=bool)
    labeled[warm] = True
    quota_max = max(1, int(round(cfg.round_fraction * n)))
    snaps = {}
    rnd = 0
    for target in targets:
        while labeled.sum() < target:
            rnd += 1
            idx_l = np.flatnonzero(labeled)
            idx_u = np.flatnonzero(~labeled)
            quota = int(min(quota_max, target - len(idx_l), len(idx_u)))
            forest = _first_level(X[idx_l], labels[idx_l], cfg, seed=int(rng.integers(2**31)))
            s, sc, sd = scorer(forest, X[idx_u], labels[idx_l], rng)
            if diverse:
                pick = select_batch(s, quota, X[idx_u], cfg.shortlist_factor)
            else:
                pick = np.argsort(-s, kind="stable")[:quota]
            labeled[idx_u[pick]] = True
            for j in pick:
                trace.append({"round": rnd, "budget": budget_of(target), "index": int(idx_u[j]),
                              "s_c": float(sc[j]), "s_d": float(sd[j]), "s": float(s[j])})
        snaps[target] = np.flatnonzero(labeled)
    return snaps


def _budget_sizes(n: int, budgets: Sequence[float]) -> dict[float, int]:
    return {b: max(1, int(round(b * n))) for b in budgets}


def acquire(X: np.ndarray, labels: np.ndarray, cfg: AcquisitionConfig, strategy: str = "eoal") -> AcquisitionResult:
    """Labeled index sets for every budget in ``cfg.budgets`` under ``strategy``.

    Budgets at or above ``init_fraction`` share one trajectory that starts
    from a stratified-random warm start of ``init_fraction``; smaller
    budgets start from a stratified seed of half their size and acquire the
    other half.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown acquisition strategy {strategy!r}")
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    sizes = _budget_sizes(n, cfg.budgets)
    if min(sizes.values()) < 1 or n < 2:
        raise ValueError("pool too small for the smallest budget")
    rng = np.random.default_rng([cfg.seed, STRATEGIES.index(strategy)])
    result = AcquisitionResult({})
    size_to_budget = {v: k for k, v in sizes.items()}

    if strategy == "stratified_random":
        for b, m in sizes.items():
            result.subsets[b] = np.arange(n) if m >= n else stratified_indices(labels, m, rng)
        return result

    if strategy == "eoal":
        scorer, diverse = _eoal_scorer(cfg), True
    elif strategy == "uncertainty":
        scorer, diverse = _entropy_scorer(cfg), False
    elif strategy == "density_weighted":
        scorer, diverse = _density_scorer(cfg, X), False
    else:
        scorer, diverse = _entropy_scorer(cfg), True

    n_init = int(round(cfg.init_fraction * n))
    small = sorted(m for b, m in sizes.items() if m < n_init)
    large = sorted(m for b, m in sizes.items() if m >= n_init and m < n)
    for b, m in sizes.items():
        if m >= n:
            result.subsets[b] = np.arange(n)
    for m in small:
        warm = stratified_indices(labels, max(1, m // 2), rng)
        snaps = _run_trajectory(X, labels, warm, [m], cfg, scorer, diverse, rng, result.trace, size_to_budget.get)
        result.subsets[size_to_budget[m]] = snaps[m]
    if large:
        warm = stratified_indices(labels, n_init, rng)
        snaps = _run_trajectory(X, labels, warm, large, cfg, scorer, diverse, rng, result.trace, size_to_budget.get)
        for m in large:
            result.subsets[size_to_budget[m]] = snaps[m]
    result.subsets = dict(sorted(result.subsets.items()))
    return result


def run_rounds(X: np.ndarray, labels: np.ndarray, cfg: AcquisitionConfig) -> AcquisitionResult:
    """EOAL acquisition (see :func:`acquire`)."""
    return acquire(X, labels, cfg, "eoal")


def baseline_strategy(kind: str, X: np.ndarray, labels: np.ndarray, cfg: AcquisitionConfig) -> AcquisitionResult:
    if kind == "eoal" or kind not in STRATEGIES:
        raise ValueError(f"unknown baseline strategy {kind!r}")
    return acquire(X, labels, cfg, kind)
