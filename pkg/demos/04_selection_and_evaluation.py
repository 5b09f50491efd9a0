"""Build the performance matrix, train the selector and compare policies.

Uses attacks at epsilon 0.1 as the selector's training pool and evaluates on
unseen epsilons, reporting every policy against the hindsight oracle.

    python demos/04_selection_and_evaluation.py
"""
from __future__ import annotations

from collections import Counter

from sage_ids import acquisition, attacks, data, defenses, evaluation, matrix, nnet

ds = data.synth_generate(1200, 10, 3, imbalance=(0.5, 0.3, 0.2), seed=0, separation=3.0)
train, test = data.split(ds, data.SplitSpec(0.8, 0))
base = nnet.train(train, nnet.TrainConfig(epochs=15, hidden=(32, 16), seed=0))
portfolio = defenses.train_portfolio(
    train, base, defenses.DefenseConfig(steps=5, rslad_steps=(3, 6), train=nnet.TrainConfig(epochs=8, hidden=(32, 16), seed=2)),
    seed=3)
suite = attacks.generate_suite(base, test, seed=1, steps=5)

pool, _ = evaluation.split_suite(suite)
pm = matrix.build_matrix(portfolio, pool)
labels = matrix.label_optimal(pm)
print(f"performance matrix: {pm.n_samples} samples x {len(pm.defense_ids)} defenses")
print("optimal-label counts:", {defenses.DefenseId(k).name: v for k, v in Counter(labels.tolist()).most_common()})

acq = acquisition.AcquisitionConfig(working_set=500, first_level_trees=30, seed=4)
report, ctx = evaluation.epsilon_shift_protocol(portfolio, base, suite, test, acq,
                                                selector_hyper={"n_trees": 60}, budget=0.5)
print(f"\n{'policy':18s} {'Macro-F1':>9s} {'score':>7s}")
for name in report.policies:
    avg = report.average(name)
    print(f"{name:18s} {avg['macro_f1']:9.4f} {avg['score']:7.4f}")

print("\nSAGE Macro-F1 per attack:")
for attack, row in report.attack_rows("SAGE").items():
    print(f"  {attack:10s} {row['macro_f1']:.4f}")
