"""Attack a small intrusion-style classifier and compare the defense portfolio.

Trains a base MLP, crafts L-infinity adversarial copies of the test split with
the seven attack kinds, and reports how each of the ten defenses copes at one
perturbation size.

    python demos/02_attacks_and_defenses.py
"""
from __future__ import annotations

import numpy as np

from sage_ids import attacks, data, defenses, metrics, nnet

ds = data.synth_generate(1200, 10, 3, imbalance=(0.5, 0.3, 0.2), seed=0, separation=3.0)
train, test = data.split(ds, data.SplitSpec(0.8, 0))
base = nnet.train(train, nnet.TrainConfig(epochs=15, hidden=(32, 16), seed=0))
C = test.class_count
print(f"clean Macro-F1 of the base model: {metrics.macro_f1(test.y, base.predict(test.X), C):.3f}")

eps = 0.2
advs = [attacks.run_attack(base, test, attacks.AttackSpec(kind, eps, steps=5), seed=1) for kind in attacks.ALL_KINDS]
for adv in advs:
    shift = np.abs(adv.X_adv - test.X).max()
    f1 = metrics.macro_f1(test.y, base.predict(adv.X_adv), C)
    print(f"{adv.attack:10s} eps={eps}  max |delta|={shift:.3f}  undefended Macro-F1={f1:.3f}")

cfg = defenses.DefenseConfig(steps=5, rslad_steps=(3, 6), train=nnet.TrainConfig(epochs=8, hidden=(32, 16), seed=2))
portfolio = defenses.train_portfolio(train, base, cfg, seed=3, eval_ds=test)

print("\nMacro-F1 per defense (rows) and attack (columns)")
print(f"{'':10s}" + "".join(f"{a.attack[:8]:>9s}" for a in advs))
for dm in portfolio:
    row = [metrics.macro_f1(test.y, defenses.defended_predict(dm, a.X_adv, a.sample_ids), C) for a in advs]
    print(f"{dm.id.name:10s}" + "".join(f"{v:9.3f}" for v in row))
print("\nNo single row wins every column, which is what per-sample selection exploits.")
