"""Performance matrix over (adversarial sample, defense) and optimal-defense labels.

A sample's entry for a defense is 1 when the defended prediction matches
the true label. Ties among correct defenses go to the defense with the
higher pool-level Macro-F1, then to the lower :class:`DefenseId`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AdvDataset
from .defenses import DefenseId, DefenseModel, defended_predict
from .metrics import macro_f1


@dataclass(frozen=True, eq=False)
class PerformanceMatrix:
    sample_ids: np.ndarray
    attacks: np.ndarray
    epsilons: np.ndarray
    y: np.ndarray
    defense_ids: tuple[DefenseId, ...]
    predictions: np.ndarray  # (n, n_defenses) defended predictions
    side_f1: np.ndarray  # (n_defenses,) pool-level Macro-F1
    class_count: int
    X: np.ndarray | None = None

    @property
    def entries(self) -> np.ndarray:
        return (self.predictions == self.y[:, None]).astype(np.uint8)

    @property
    def n_samples(self) -> int:
        return len(self.y)

    def subset(self, mask: np.ndarray) -> "PerformanceMatrix":
        """Rows selected by ``mask``; the side table is recomputed on them."""
        preds = self.predictions[mask]
        y = self.y[mask]
        side = np.array([macro_f1(y, preds[:, j], self.class_count) for j in range(len(self.defense_ids))])
        return PerformanceMatrix(
            self.sample_ids[mask], self.attacks[mask], self.epsilons[mask], y, self.defense_ids, preds, side,
            self.class_count, None if self.X is None else self.X[mask],
        )


def pool_predictions(portfolio: Sequence[DefenseModel], pool: Sequence[AdvDataset]) -> np.ndarray:
    cols = []
    for dm in portfolio:
        cols.append(np.concatenate([defended_predict(dm, adv.X_adv, adv.sample_ids) for adv in pool]))
    return np.stack(cols, axis=1)


def build_matrix(portfolio: Sequence[DefenseModel], pool: Sequence[AdvDataset], expected_size: int | None = 10) -> PerformanceMatrix:
    """Run every defense on every sample of ``pool``."""
    if expected_size is not None and len(portfolio) != expected_size:
        raise ValueError(f"portfolio must hold {expected_size} defenses, got {len(portfolio)}")
    if not pool:
        raise ValueError("empty adversarial pool")
    d = portfolio[0].model.n_inputs
    for adv in pool:
        if adv.X_adv.shape[1] != d:
            raise ValueError(f"pool features ({adv.X_adv.shape[1]}) do not match defense input dim ({d})")
    C = pool[0].base.class_count
    preds = pool_predictions(portfolio, pool)
    y = np.concatenate([adv.y for adv in pool])
    side = np.array([macro_f1(y, preds[:, j], C) for j in range(len(portfolio))])
    return PerformanceMatrix(
        sample_ids=np.concatenate([adv.sample_ids for adv in pool]),
        attacks=np.concatenate([[adv.attack] * len(adv) for adv in pool]).astype(object),
        epsilons=np.concatenate([[adv.epsilon] * len(adv) for adv in pool]),
        y=y,
        defense_ids=tuple(dm.id for dm in portfolio),
        predictions=preds,
        side_f1=side,
        class_count=C,
        X=np.vstack([adv.X_adv for adv in pool]),
    )


def _rank_order(side_f1: np.ndarray) -> np.ndarray:
    """Column indices from best to worst side F1; stable, so ties keep id order."""
    return np.argsort(-side_f1, kind="stable")


def label_optimal(pm: PerformanceMatrix, mode: str = "indicator") -> np.ndarray:
    """Per-sample optimal defense as an array of DefenseId values.

    ``mode="indicator"``: best side-F1 defense among the correct ones, or
    the best side-F1 defense overall when none is correct.
    ``mode="group"``: the defense with the best Macro-F1 inside the sample's
    (attack, true class) group.
    """
    ids = np.array([int(d) for d in pm.defense_ids])
    if mode == "indicator":
        order = _rank_order(pm.side_f1)
        ok = pm.entries[:, order].astype(bool)
        first = np.where(ok.any(axis=1), ok.argmax(axis=1), 0)
        return ids[order[first]]
    if mode == "group":
        out = np.empty(pm.n_samples, dtype=np.int64)
        keys = np.array([f"{a}|{c}" for a, c in zip(pm.attacks, pm.y)])
        for key in np.unique(keys):
            sel = keys == key
            f1 = np.array([macro_f1(pm.y[sel], pm.predictions[sel, j], pm.class_count) for j in range(len(ids))])
            out[sel] = ids[_rank_order(f1)[0]]
        return out
    raise ValueError(f"unknown labeling mode {mode!r}")


def oracle_assign(portfolio: Sequence[DefenseModel], adv_test: Sequence[AdvDataset]) -> np.ndarray:
    """Hindsight per-sample choice on the test pool itself."""
    return label_optimal(build_matrix(portfolio, adv_test, expected_size=None))


def save_matrix(pm: PerformanceMatrix, labels: np.ndarray, path: str | Path, side_path: str | Path) -> None:
    names = [d.name for d in pm.defense_ids]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "attack", "epsilon", "true_label", *names, "optimal_label"])
        ent = pm.entries
        for i in range(pm.n_samples):
            w.writerow([int(pm.sample_ids[i]), pm.attacks[i], repr(float(pm.epsilons[i])), int(pm.y[i]), *ent[i].tolist(), DefenseId(labels[i]).name])
    with Path(side_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["defense_id", "macro_f1"])
        for d, f in zip(names, pm.side_f1):
            w.writerow([d, repr(float(f))])
