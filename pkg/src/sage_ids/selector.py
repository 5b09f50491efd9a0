"""Random-forest defense selector.

Trees are grown with scikit-learn's CART (Gini, sqrt-feature subsampling)
on bootstrap samples drawn here, then flattened into plain arrays: leaf
class histograms are recounted over the global defense-class list and
prediction is hard voting, done by a compiled traversal so that one-sample
dispatch stays cheap.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from sklearn.tree import DecisionTreeClassifier

from .defenses import PORTFOLIO

logger = logging.getLogger(__name__)

SCHEMA_ID = "sage_ids.forest/1"


# CART thresholds were chosen on float32 inputs, so every traversal compares
# the float32-rounded feature value against the float64 threshold.


@njit(cache=True)
def _descend(x, feature, threshold, left, right, node):
    while feature[node] >= 0:
        if np.float64(np.float32(x[feature[node]])) <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True)
def _votes(X, feature, threshold, left, right, leaf_class, roots, n_classes):
    n = X.shape[0]
    out = np.zeros((n, n_classes), dtype=np.int64)
    for i in range(n):
        for t in range(roots.shape[0]):
            out[i, leaf_class[_descend(X[i], feature, threshold, left, right, roots[t])]] += 1
    return out


@njit(cache=True)
def _vote_one(x, links, thr, roots, n_classes):
    """Hard-vote winner for one row over packed nodes.

    ``links`` rows are (feature or -1-leaf_class, left, right) and ``thr``
    is a float32 view into the fourth column of the same buffer, so each
    visit touches 16 bytes. Voting stops once no class can catch up with
    the leader.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    n_trees = roots.shape[0]
    for t in range(n_trees):
        node = roots[t]
        f = links[node, 0]
        while f >= 0:
            if np.float32(x[f]) <= thr[node, 3]:
                node = links[node, 1]
            else:
                node = links[node, 2]
            f = links[node, 0]
        counts[-1 - f] += 1
        left_over = n_trees - t - 1
        best = 0
        for k in range(1, n_classes):
            if counts[k] > counts[best]:
                best = k
        decided = True
        for k in range(n_classes):
            # a later class needs to overtake; an earlier one only to tie
            if k != best and counts[k] + left_over >= counts[best] + (1 if k > best else 0):
                decided = False
                break
        if decided:
            return best
    return best


def _round_down_f32(t: np.ndarray) -> np.ndarray:
    """Largest float32 <= t; for float32 x, ``x <= t`` iff ``x <= _round_down_f32(t)``."""
    t32 = t.astype(np.float32)
    over = t32.astype(np.float64) > t
    t32[over] = np.nextafter(t32[over], np.float32(-np.inf))
    return t32


@njit(cache=True)
def _leaves(X, feature, threshold, left, right, root):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        out[i] = _descend(X[i], feature, threshold, left, right, root)
    return out


def _as_split_input(X) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(X, dtype=np.float32), dtype=np.float64)


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    hist: np.ndarray  # (n_nodes, n_classes) training counts, leaves only
    roots: np.ndarray
    classes: tuple[int, ...]
    n_features: int
    hyper: dict = field(default_factory=dict)
    oob_accuracy: float | None = None

    def __post_init__(self):
        leaf_class = np.where(self.feature < 0, self.hist.argmax(axis=1), -1)
        object.__setattr__(self, "leaf_class", leaf_class.astype(np.int64))
        links = np.zeros((len(self.feature), 4), dtype=np.int32)
        links[:, 0] = np.where(self.feature < 0, -1 - leaf_class, self.feature)
        links[:, 1] = self.left
        links[:, 2] = self.right
        thr = links.view(np.float32)
        thr[:, 3] = _round_down_f32(np.where(self.feature < 0, 0.0, self.threshold))
        object.__setattr__(self, "_links", links)
        object.__setattr__(self, "_thr", thr)
        object.__setattr__(self, "_roots32", self.roots.astype(np.int32))

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"input has {X.shape[1]} features, selector expects {self.n_features}")
        return np.ascontiguousarray(X)

    def predict_one(self, x: np.ndarray) -> int:
        """Class id for a single feature row (compiled fast path)."""
        if x.shape != (self.n_features,):
            raise ValueError(f"input has shape {x.shape}, selector expects ({self.n_features},)")
        k = _vote_one(x, self._links, self._thr, self._roots32, len(self.classes))
        return self.classes[k]

    def vote_counts(self, X) -> np.ndarray:
        return _votes(self._check(X), self.feature, self.threshold, self.left, self.right, self.leaf_class, self.roots, len(self.classes))

    def predict_posteriors(self, X) -> np.ndarray:
        """Fraction of trees voting for each class, columns in ``classes`` order."""
        return self.vote_counts(X) / self.n_trees

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum: ties go to the earlier class id
        return np.asarray(self.classes)[self.vote_counts(X).argmax(axis=1)]

    def tree_slice(self, t: int) -> tuple[int, int]:
        start = self.roots[t]
        stop = self.roots[t + 1] if t + 1 < self.n_trees else len(self.feature)
        return int(start), int(stop)


def fit(
    X: np.ndarray,
    labels: Sequence[int],
    n_trees: int = 200,
    max_depth: int | None = 16,
    min_leaf: int = 1,
    max_features: str | float | None = "sqrt",
    bootstrap: bool = True,
    classes: Sequence[int] | None = None,
    seed: int = 0,
) -> TreeEnsemble:
    """Grow a random forest mapping feature rows to defense labels."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("selector needs at least 2 distinct labels")
    if len(y) < 10:
        raise ValueError("selector needs at least 10 rows")
    classes = tuple(int(c) for c in (classes if classes is not None else PORTFOLIO))
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        yi = np.array([lookup[v] for v in y])
    except KeyError as exc:
        raise ValueError(f"label {exc} not among the selector classes") from None
    K = len(classes)
    Xs = _as_split_input(X)
    n = len(y)

    feats, thrs, lefts, rights, hists, roots = [], [], [], [], [], []
    oob_votes = np.zeros((n, K), dtype=np.int64)
    offset = 0
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        clf = DecisionTreeClassifier(
            criterion="gini",
            max_depth=max_depth,
            min_samples_leaf=min_leaf,
            max_features=max_features,
            random_state=int(rng.integers(2**31 - 1)),
        )
        clf.fit(Xs[idx], yi[idx])
        tr = clf.tree_
        f = tr.feature.astype(np.int64)
        f[tr.children_left < 0] = -1
        thr = tr.threshold.astype(np.float64)
        l = np.where(tr.children_left >= 0, tr.children_left + offset, -1).astype(np.int64)
        r = np.where(tr.children_right >= 0, tr.children_right + offset, -1).astype(np.int64)
        leaves = _leaves(Xs[idx], f, thr, l - offset * (l >= 0), r - offset * (r >= 0), 0)
        h = np.zeros((len(f), K), dtype=np.int64)
        np.add.at(h, (leaves, yi[idx]), 1)
        if bootstrap:
            oob = np.setdiff1d(np.arange(n), idx)
            if len(oob):
                lv = _leaves(Xs[oob], f, thr, l - offset * (l >= 0), r - offset * (r >= 0), 0)
                oob_votes[oob, h[lv].argmax(axis=1)] += 1
        feats.append(f)
        thrs.append(thr)
        lefts.append(l)
        rights.append(r)
        hists.append(h)
        roots.append(offset)
        offset += len(f)

    oob_acc = None
    seen = oob_votes.sum(axis=1) > 0
    if seen.any():
        oob_acc = float((oob_votes[seen].argmax(axis=1) == yi[seen]).mean())
        logger.info("selector out-of-bag accuracy %.4f on %d rows", oob_acc, seen.sum())
    return TreeEnsemble(
        feature=np.concatenate(feats),
        threshold=np.concatenate(thrs),
        left=np.concatenate(lefts),
        right=np.concatenate(rights),
        hist=np.concatenate(hists),
        roots=np.array(roots, dtype=np.int64),
        classes=classes,
        n_features=X.shape[1],
        hyper={"n_trees": n_trees, "max_depth": max_depth, "min_leaf": min_leaf, "max_features": max_features, "bootstrap": bootstrap, "seed": seed},
        oob_accuracy=oob_acc,
    )


def predict_posteriors(ens: TreeEnsemble, x) -> np.ndarray:
    p = ens.predict_posteriors(x)
    return p[0] if np.ndim(x) == 1 else p


def predict_defense(ens: TreeEnsemble, x):
    """Defense id(s) with the most tree votes; ties go to the lower id."""
    if np.ndim(x) == 1:
        return ens.predict_one(np.asarray(x, dtype=np.float64))
    return ens.predict(x)


def permute_trees(ens: TreeEnsemble, order: Sequence[int]) -> TreeEnsemble:
    """Same forest with trees stored in a different order."""
    parts = [ens.tree_slice(t) for t in order]
    feats, thrs, lefts, rights, hists, roots = [], [], [], [], [], []
    offset = 0
    for start, stop in parts:
        shift = offset - start
        l = ens.left[start:stop]
        r = ens.right[start:stop]
        feats.append(ens.feature[start:stop])
        thrs.append(ens.threshold[start:stop])
        lefts.append(np.where(l >= 0, l + shift, -1))
        rights.append(np.where(r >= 0, r + shift, -1))
        hists.append(ens.hist[start:stop])
        roots.append(offset)
        offset += stop - start
    return TreeEnsemble(
        np.concatenate(feats), np.concatenate(thrs), np.concatenate(lefts), np.concatenate(rights),
        np.concatenate(hists), np.array(roots, dtype=np.int64), ens.classes, ens.n_features, ens.hyper, ens.oob_accuracy,
    )


def forest_to_dict(ens: TreeEnsemble) -> dict:
    trees = []
    for t in range(ens.n_trees):
        start, stop = ens.tree_slice(t)
        l = ens.left[start:stop]
        r = ens.right[start:stop]
        leaf = ens.feature[start:stop] < 0
        trees.append({
            "feature": ens.feature[start:stop].tolist(),
            "threshold": ens.threshold[start:stop].tolist(),
            "left": np.where(l >= 0, l - start, -1).tolist(),
            "right": np.where(r >= 0, r - start, -1).tolist(),
            "leaf_hist": {str(i): ens.hist[start + i].tolist() for i in np.flatnonzero(leaf)},
        })
    return {
        "schema": SCHEMA_ID,
        "classes": list(ens.classes),
        "n_features": ens.n_features,
        "hyper": ens.hyper,
        "oob_accuracy": ens.oob_accuracy,
        "trees": trees,
    }


def forest_from_dict(d: dict) -> TreeEnsemble:
    if d.get("schema") != SCHEMA_ID:
        raise ValueError(f"unknown forest schema {d.get('schema')!r}")
    K = len(d["classes"])
    feats, thrs, lefts, rights, hists, roots = [], [], [], [], [], []
    offset = 0
    for tree in d["trees"]:
        f = np.array(tree["feature"], dtype=np.int64)
        l = np.array(tree["left"], dtype=np.int64)
        r = np.array(tree["right"], dtype=np.int64)
        h = np.zeros((len(f), K), dtype=np.int64)
        for i, row in tree["leaf_hist"].items():
            h[int(i)] = row
        feats.append(f)
        thrs.append(np.array(tree["threshold"], dtype=np.float64))
        lefts.append(np.where(l >= 0, l + offset, -1))
        rights.append(np.where(r >= 0, r + offset, -1))
        hists.append(h)
        roots.append(offset)
        offset += len(f)
    return TreeEnsemble(
        np.concatenate(feats), np.concatenate(thrs), np.concatenate(lefts), np.concatenate(rights),
        np.concatenate(hists), np.array(roots, dtype=np.int64), tuple(d["classes"]), d["n_features"], d["hyper"], d["oob_accuracy"],
    )


def save_forest(ens: TreeEnsemble, path: str | Path) -> None:
    Path(path).write_text(json.dumps(forest_to_dict(ens)))


def load_forest(path: str | Path) -> TreeEnsemble:
    return forest_from_dict(json.loads(Path(path).read_text()))
