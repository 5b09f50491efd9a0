from __future__ import annotations

import numpy as np


def confusion_counts(y_true, y_pred, C: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (tp, fp, fn)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if len(y_true) and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    cm = np.bincount(y_true * C + y_pred, minlength=C * C).reshape(C, C)
    tp = np.diag(cm)
    return tp, cm.sum(axis=0) - tp, cm.sum(axis=1) - tp


def macro_f1(y_true, y_pred, C: int) -> float:
    """Unweighted mean of per-class F1.

    Classes that occur in neither ``y_true`` nor ``y_pred`` are left out of
    the mean; any other class with no true positive scores 0.
    """
    tp, fp, fn = confusion_counts(y_true, y_pred, C)
    present = (tp + fp + fn) > 0
    if not present.any():
        raise ValueError("macro_f1 of an empty label set is undefined")
    f1 = 2 * tp[present] / (2 * tp[present] + fp[present] + fn[present])
    return float(f1.mean())


def weighted_score(counts, f1s) -> float:
    """Sum over defenses of (share of samples assigned) x (that defense's Macro-F1)."""
    counts = np.asarray(counts, dtype=np.float64)
    f1s = np.asarray(f1s, dtype=np.float64)
    if counts.shape != f1s.shape:
        raise ValueError("counts and f1s must align")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("weighted_score needs at least one assigned sample")
    return float((counts / total * f1s).sum())


def assignment_score(assign, y_true, y_pred, C: int, n_defenses: int) -> float:
    """Weighted score of a per-sample dispatch: each defense is scored on the samples routed to it."""
    assign = np.asarray(assign)
    counts = np.bincount(assign, minlength=n_defenses)
    f1s = np.zeros(n_defenses)
    for d in np.flatnonzero(counts):
        sel = assign == d
        f1s[d] = macro_f1(np.asarray(y_true)[sel], np.asarray(y_pred)[sel], C)
    return weighted_score(counts, f1s)
