from __future__ import annotations

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml

from sage_ids import cli, data, pipeline

TINY = {
    "dataset": {"synth": {"n": 400, "d": 5, "classes": 3, "imbalance": [0.5, 0.3, 0.2]}},
    "nnet": {"epochs": 3, "hidden": [8]},
    "attacks": {"steps": 2},
    "defenses": {"steps": 2, "rslad_steps": [1, 2]},
    "acquisition": {"working_set": 150, "first_level_trees": 8, "first_level_depth": 6},
    "selector": {"n_trees": 15},
    "evaluation": {"random_runs": 10, "timing_samples": 40},
}


def tiny_config(out, **extra):
    raw = json.loads(json.dumps(TINY))
    raw.update(extra)
    raw["out"] = str(out)
    return pipeline.config_from_dict(raw)


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out)
    report = pipeline.run_all(cfg)
    return cfg, report


def non_timing(path):
    d = json.loads(path.read_text())
    d.pop("timing", None)
    return d


def test_run_all_produces_every_artifact(finished):
    cfg, report = finished
    stages = pipeline.Workspace(cfg.out).manifest()["stages"]
    assert set(stages) == set(pipeline.STAGES)
    for rel in ("report.json", "matrix.csv", "selector.json", "tables/macro_f1.csv", "tables/score.csv", "tables/timing.csv"):
        assert (cfg.out / rel).exists(), rel
    assert set(report.policies) == {"SAGE", "ORACLE", "DYNAMIC_RECOMMEND", "BEST_STATIC", "RANDOM", "NO_DEFENSE"}
    assert not list(cfg.out.glob(".tmp-*"))


def test_rerun_skips_every_stage(finished):
    cfg, _ = finished
    assert not any(pipeline.run_stage(s, cfg) for s in pipeline.STAGES)


def test_same_seed_same_report(finished, tmp_path):
    cfg, _ = finished
    other = tiny_config(tmp_path / "again")
    pipeline.run_all(other)
    assert non_timing(other.out / "report.json") == non_timing(cfg.out / "report.json")


def test_different_seed_changes_report(finished, tmp_path):
    cfg, _ = finished
    other = tiny_config(tmp_path / "seed1", seed=1)
    pipeline.run_all(other)
    assert non_timing(other.out / "report.json") != non_timing(cfg.out / "report.json")


def test_dependency_error(tmp_path):
    cfg = tiny_config(tmp_path / "fresh")
    with pytest.raises(pipeline.DependencyError, match="preprocess"):
        pipeline.run_stage("matrix", cfg)
    for s in ("preprocess", "train-baseline", "attack"):
        pipeline.run_stage(s, cfg)
    with pytest.raises(pipeline.DependencyError, match="train-defenses"):
        pipeline.run_stage("matrix", cfg)


def test_stale_artifact_detected(finished, tmp_path):
    cfg, _ = finished
    copy = tmp_path / "copy"
    shutil.copytree(cfg.out, copy)
    c2 = cfg.with_overrides(out=copy)
    (copy / "base_model.json").write_text((copy / "base_model.json").read_text().replace("1", "2", 1))
    with pytest.raises(pipeline.StaleArtifactError):
        pipeline.run_stage("attack", c2, force=True)


def test_changed_config_reruns_downstream(finished, tmp_path):
    cfg, _ = finished
    copy = tmp_path / "copy2"
    shutil.copytree(cfg.out, copy)
    raw = json.loads(json.dumps(TINY))
    raw["selector"]["n_trees"] = 16
    raw["out"] = str(copy)
    c2 = pipeline.config_from_dict(raw)
    ran = [pipeline.run_stage(s, c2) for s in pipeline.STAGES]
    assert ran == [s in ("train-selector", "eval", "report") for s in pipeline.STAGES]


def test_config_validation(tmp_path):
    with pytest.raises(pipeline.ConfigError, match="unknown config key"):
        pipeline.config_from_dict({"nnet": {"epoch": 3}})
    with pytest.raises(pipeline.ConfigError):
        pipeline.config_from_dict({"protocols": {"run": ["bogus"]}})
    with pytest.raises(pipeline.ConfigError):
        pipeline.config_from_dict({"attacks": {"train_epsilon": 0.15}})


def test_stage_seeds_differ():
    seeds = {pipeline.stage_seed(0, s) for s in pipeline.STAGES}
    assert len(seeds) == len(pipeline.STAGES)
    assert pipeline.stage_seed(0, "attack") == pipeline.stage_seed(0, "attack") != pipeline.stage_seed(1, "attack")


def test_default_config_covers_defaults(tmp_path):
    text = pipeline.default_config_yaml()
    assert yaml.safe_load(text) == pipeline.DEFAULTS
    assert cli.main(["init-config", "--config", str(tmp_path / "c.yaml")]) == 0
    assert yaml.safe_load((tmp_path / "c.yaml").read_text()) == pipeline.DEFAULTS


def test_cli_error_line_and_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump({**TINY, "out": str(tmp_path / "o")}))
    assert cli.main(["matrix", "--config", str(cfg_path)]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "missing_dependency" and err["stage"] == "matrix"

    bad = tmp_path / "bad.yaml"
    bad.write_text("nnet: {epoch: 1}\n")
    assert cli.main(["preprocess", "--config", str(bad)]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "config_error"

    assert cli.main(["preprocess"]) == 2


def test_cli_stage_success_and_overrides(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    out = tmp_path / "cli_out"
    assert cli.main(["preprocess", "--config", str(cfg_path), "--out", str(out), "--seed", "3", "--workers", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "ok"
    assert (out / "data" / "train.csv").exists()
    assert cli.main(["preprocess", "--config", str(cfg_path), "--out", str(out), "--seed", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "skipped"


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "sage_ids.cli", "init-config"], capture_output=True, text=True, check=True)
    assert "acquisition:" in r.stdout


def _write_csv(path, n=200):
    rng = np.random.default_rng(0)
    lines = ["a,b,label"]
    for i in range(n):
        lines.append(f"{rng.normal(3, 2):.6f},{rng.normal(-1, 0.5):.6f},{'ab'[i % 2]}")
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize("mode", ["all", "train"])
def test_csv_standardize_modes(tmp_path, mode):
    _write_csv(tmp_path / "t.csv")
    cfg = pipeline.config_from_dict({"out": str(tmp_path / "o"),
                                     "dataset": {"source": "csv", "standardize": mode, "csv": {"path": str(tmp_path / "t.csv")}}})
    pipeline.run_stage("preprocess", cfg)
    train = data.load_dataset(cfg.out / "data" / "train")
    test = data.load_dataset(cfg.out / "data" / "test")
    if mode == "train":
        np.testing.assert_allclose(train.X.mean(axis=0), 0.0, atol=1e-9)
    else:
        np.testing.assert_allclose(np.vstack([train.X, test.X]).mean(axis=0), 0.0, atol=1e-9)


def test_standardize_rejects_unknown_mode():
    with pytest.raises(pipeline.ConfigError):
        pipeline.config_from_dict({"dataset": {"standardize": "test"}})
