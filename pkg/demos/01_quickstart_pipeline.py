"""Run the whole SAGE pipeline on a small synthetic benchmark.

Every stage writes its artifacts into a workspace directory and is memoized,
so a second run finishes instantly. The same stages are available from the
command line as ``sage <stage> --config <file>``.

    python demos/01_quickstart_pipeline.py [OUT_DIR]
"""
from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from sage_ids import pipeline

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sage-demo-"))

# A shrunken configuration; omitted keys fall back to the defaults in configs/synth.yaml.
cfg = pipeline.config_from_dict({
    "out": str(out),
    "seed": 0,
    "dataset": {"synth": {"n": 1200, "d": 10, "classes": 3, "imbalance": [0.5, 0.3, 0.2]}},
    "nnet": {"epochs": 10, "hidden": [32, 16]},
    "attacks": {"steps": 5},
    "defenses": {"steps": 5, "rslad_steps": [3, 6]},
    "acquisition": {"working_set": 500, "first_level_trees": 30},
    "selector": {"n_trees": 60},
    "evaluation": {"random_runs": 20, "timing_samples": 200},
})

for stage in pipeline.STAGES:
    ran = pipeline.run_stage(stage, cfg)
    print(f"{stage:15s} {'ran' if ran else 'skipped (up to date)'}")

report = pipeline.run_all(cfg)  # every stage is cached now, so this only loads the report
print(f"\nArtifacts in {out}")
print(f"{'policy':18s} {'Macro-F1':>9s} {'score':>7s}")
for name in report.policies:
    avg = report.average(name)
    print(f"{name:18s} {avg['macro_f1']:9.4f} {avg['score']:7.4f}")
if report.timing:
    print(f"\n{'policy':18s} {'ms/sample':>10s} {'defense calls':>14s}")
    for name, t in report.timing.items():
        print(f"{name:18s} {t['ms_per_sample']:10.4f} {t['defense_calls_per_sample']:14.1f}")
