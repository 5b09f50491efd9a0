from __future__ import annotations

import csv

import numpy as np
import pytest

from sage_ids import defenses, matrix, metrics, nnet
from sage_ids.defenses import DefenseId, DefenseModel
from sage_ids.evaluation import split_suite
from sage_ids.matrix import PerformanceMatrix


@pytest.fixture(scope="module")
def train_pool(small_suite):
    return split_suite(small_suite)[0]


@pytest.fixture(scope="module")
def pm(small_portfolio, train_pool):
    return matrix.build_matrix(small_portfolio, train_pool)


def constant_defense(did: DefenseId, cls: int, d: int, C: int) -> DefenseModel:
    b = np.full(C, -50.0)
    b[cls] = 50.0
    return DefenseModel(did, nnet.NeuralModel((np.zeros((d, C)),), (b,)))


def test_entries_match_brute_force(pm, small_portfolio, train_pool):
    assert pm.entries.shape == (7 * 150, 10)
    row = 0
    for adv in train_pool:
        for i in range(len(adv)):
            for j, d in enumerate(small_portfolio):
                ok = defenses.defended_predict(d, adv.X_adv[i], adv.sample_ids[i]) == adv.y[i]
                assert pm.entries[row, j] == int(ok)
            row += 1


def test_side_table(pm):
    for j in range(10):
        assert pm.side_f1[j] == pytest.approx(metrics.macro_f1(pm.y, pm.predictions[:, j], pm.class_count))


def test_constant_defense_column(small_portfolio, train_pool, small_data):
    d, C = small_data[1].n_features, small_data[1].class_count
    port = [constant_defense(DefenseId(i), i % C, d, C) for i in range(10)]
    pm = matrix.build_matrix(port, train_pool)
    for j in range(10):
        assert np.array_equal(pm.entries[:, j], (pm.y == j % C).astype(np.uint8))
        # a constant prediction of class k: F1 of class k is 2p/(1+p), other classes absent from y_pred score 0
        p = (pm.y == j % C).mean()
        assert pm.side_f1[j] == pytest.approx((2 * p / (1 + p)) / C)


def hand_matrix(pred_rows, y, side, ids=(0, 1, 2)):
    preds = np.array(pred_rows)
    n = len(y)
    return PerformanceMatrix(np.arange(n), np.array(["A"] * n, dtype=object), np.full(n, 0.1), np.array(y),
                             tuple(DefenseId(i) for i in ids), preds, np.array(side), 2)


def test_label_single_correct_defense():
    pm = hand_matrix([[1, 0, 1]], [0], [0.9, 0.5, 0.7])
    assert matrix.label_optimal(pm).tolist() == [1]


def test_label_prefers_higher_side_f1_among_correct():
    pm = hand_matrix([[0, 1, 0]], [0], [0.6, 0.9, 0.8])
    assert matrix.label_optimal(pm).tolist() == [2]


def test_label_tie_goes_to_lower_id():
    pm = hand_matrix([[0, 0, 1]], [0], [0.7, 0.7, 0.9])
    assert matrix.label_optimal(pm).tolist() == [0]


def test_label_fallback_when_no_defense_is_correct():
    pm = hand_matrix([[1, 1, 1]], [0], [0.6, 0.8, 0.7])
    assert matrix.label_optimal(pm).tolist() == [1]


def test_labels_permutation_equivariant(pm):
    perm = np.random.default_rng(0).permutation(pm.n_samples)
    shuffled = PerformanceMatrix(pm.sample_ids[perm], pm.attacks[perm], pm.epsilons[perm], pm.y[perm], pm.defense_ids,
                                 pm.predictions[perm], pm.side_f1, pm.class_count)
    np.testing.assert_array_equal(matrix.label_optimal(shuffled), matrix.label_optimal(pm)[perm])


def test_labels_are_correct_when_possible(pm):
    labels = matrix.label_optimal(pm)
    col = {int(d): j for j, d in enumerate(pm.defense_ids)}
    ok = pm.entries[np.arange(pm.n_samples), [col[int(l)] for l in labels]]
    assert np.array_equal(ok.astype(bool), pm.entries.any(axis=1))


def test_group_mode(pm):
    labels = matrix.label_optimal(pm, "group")
    assert set(labels.tolist()) <= {int(d) for d in pm.defense_ids}
    with pytest.raises(ValueError):
        matrix.label_optimal(pm, "magic")


def test_build_errors(small_portfolio, train_pool):
    with pytest.raises(ValueError, match="10"):
        matrix.build_matrix(small_portfolio[:3], train_pool)
    with pytest.raises(ValueError, match="empty"):
        matrix.build_matrix(small_portfolio, [])


def test_csv_format(pm, tmp_path):
    labels = matrix.label_optimal(pm)
    matrix.save_matrix(pm, labels, tmp_path / "m.csv", tmp_path / "s.csv")
    with (tmp_path / "m.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sample_id", "attack", "epsilon", "true_label", *[d.name for d in DefenseId], "optimal_label"]
    assert len(rows) == pm.n_samples + 1
    assert {r[-1] for r in rows[1:]} <= {d.name for d in DefenseId}
    assert all(set(r[4:14]) <= {"0", "1"} for r in rows[1:])
    with (tmp_path / "s.csv").open() as fh:
        side = list(csv.reader(fh))
    assert side[0] == ["defense_id", "macro_f1"] and len(side) == 11
