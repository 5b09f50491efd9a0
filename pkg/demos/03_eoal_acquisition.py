"""Entropic open-set active learning on a toy defense-label pool.

Shows the two entropy terms that make up the acquisition score and the
labeled subsets chosen at each budget, compared with stratified sampling.

    python demos/03_eoal_acquisition.py
"""
from __future__ import annotations

import numpy as np

from sage_ids import acquisition

rng = np.random.default_rng(0)
# Three well-populated label groups plus a rare fourth one off to the side.
centers = np.array([[0, 0], [4, 0], [0, 4], [6, 6]], dtype=float)
sizes = [500, 400, 300, 30]
X = np.vstack([c + rng.normal(scale=0.8, size=(n, 2)) for c, n in zip(centers, sizes)])
labels = np.repeat(np.arange(4), sizes)

# Closed-set entropy rewards posteriors that are uncertain among known labels.
# Open-set entropy rewards points that sit firmly inside one feature cluster.
P = np.array([[0.98, 0.01, 0.01], [0.34, 0.33, 0.33]])
print("closed-set entropy of a confident and a uniform posterior:", acquisition.closed_entropy(P).round(3))
km = acquisition.cluster_centers(X, 4, seed=0)
pts = np.array([[0.0, 0.0], [2.0, 2.0]])
print("open-set entropy at a cluster center and between clusters:", acquisition.open_entropy(pts, km, 1.0).round(3))

cfg = acquisition.AcquisitionConfig(K=4, budgets=(0.02, 0.10, 0.20), working_set=800, first_level_trees=30, seed=1)
for strategy in ("eoal", "stratified_random"):
    res = acquisition.acquire(X, labels, cfg, strategy)
    for b, idx in res.subsets.items():
        counts = np.bincount(labels[idx], minlength=4)
        print(f"{strategy:18s} budget={b:.2f}  n={len(idx):4d}  per label={counts.tolist()}")

res = acquisition.acquire(X, labels, cfg, "eoal")
last = res.trace[-1]
print("\nlast round trace:", {k: (round(v, 4) if isinstance(v, float) else v) for k, v in last.items() if not isinstance(v, list)})
