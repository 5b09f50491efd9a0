"""Config-driven, memoized stage runner.

Stages form a fixed chain (preprocess -> train-baseline -> attack ->
train-defenses -> matrix -> acquire -> train-selector -> eval -> report).
Each stage writes its files atomically, then records in ``manifest.json``
the hash of its inputs (own config section, stage seed, upstream output
hashes) and the hash of every output file. A stage whose input hash is
unchanged and whose outputs are intact is skipped.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import acquisition, attacks, data, defenses, evaluation, nnet, selector
from .matrix import build_matrix, label_optimal, save_matrix

logger = logging.getLogger(__name__)

STAGES = (
    "preprocess", "train-baseline", "attack", "train-defenses", "matrix",
    "acquire", "train-selector", "eval", "report",
)
UPSTREAM = {
    "preprocess": (),
    "train-baseline": ("preprocess",),
    "attack": ("preprocess", "train-baseline"),
    "train-defenses": ("preprocess", "train-baseline"),
    "matrix": ("preprocess", "attack", "train-defenses"),
    "acquire": ("matrix",),
    "train-selector": ("matrix", "acquire"),
    "eval": ("preprocess", "train-baseline", "attack", "train-defenses", "matrix", "acquire", "train-selector"),
    "report": ("eval",),
}
# config sections (or dotted keys) hashed into each stage's input key
SECTIONS = {
    "preprocess": ("dataset", "split"),
    "train-baseline": ("nnet",),
    "attack": ("attacks",),
    "train-defenses": ("defenses", "nnet"),
    "matrix": ("attacks", "evaluation"),
    "acquire": ("acquisition", "selector.budget", "selector.strategy"),
    "train-selector": ("selector",),
    "eval": ("evaluation", "protocols", "acquisition", "selector", "attacks"),
    "report": (),
}
PROTOCOLS = ("standard", "eps_shift", "exclusion", "al_ablation")
MANIFEST = "manifest.json"
ARTIFACT_SCHEMA = "sage_ids.artifact/1"


class PipelineError(RuntimeError):
    """Base class; ``code`` is the machine-readable error kind."""

    code = "pipeline_error"


class ConfigError(PipelineError):
    code = "config_error"


class DependencyError(PipelineError):
    code = "missing_dependency"


class StaleArtifactError(PipelineError):
    code = "stale_artifact"


# -- configuration ------------------------------------------------------------


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/default",
    "workers": 1,
    "dataset": {
        "source": "synth",
        "standardize": "all",
        "synth": {"n": 5000, "d": 20, "classes": 4, "imbalance": [0.4, 0.3, 0.2, 0.1], "separation": 3.0, "label_noise": 0.05},
        "csv": {"path": None, "label_column": "label", "max_rows": 20000},
    },
    "split": {"train_fraction": 0.8},
    "nnet": {"epochs": 30, "batch_size": 128, "learning_rate": 0.001, "hidden": [64, 32]},
    "attacks": {
        "kinds": [k.value for k in attacks.ALL_KINDS],
        "epsilons": list(attacks.EPSILON_GRID),
        "train_epsilon": attacks.TRAIN_EPSILON,
        "steps": 10,
        "freeze_categorical": False,
        "extras": {k.value: dict(v) for k, v in attacks.DEFAULT_EXTRAS.items()},
    },
    "defenses": {
        "epsilon": 0.1, "steps": 10, "iat_beta": 1.0, "trades_beta": 6.0, "fat_replay": 4, "ga_sigma": 0.1,
        "dd_temperature": 20.0, "rslad_steps": [10, 100], "fs_bits": 8, "gn_sigma": 0.05,
    },
    "acquisition": {
        "K": 10, "temperature": 1.0, "init_fraction": 0.10, "budgets": [0.01, 0.10, 0.20, 0.50],
        "round_fraction": 0.05, "shortlist_factor": 5, "direction": "largest", "working_set": 2000,
        "first_level_trees": 100, "first_level_depth": 16,
    },
    "selector": {
        "n_trees": 200, "max_depth": 16, "min_leaf": 1, "max_features": "sqrt", "bootstrap": True,
        "budget": 0.5, "strategy": "eoal",
    },
    "evaluation": {"random_runs": 100, "neighbors": 1, "timing_samples": 1000, "label_mode": "indicator"},
    "protocols": {"run": ["standard"], "exclusion_tiers": None, "n_tiers": 3, "al_strategies": list(acquisition.STRATEGIES)},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k != "extras":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class PipelineConfig:
    """Validated pipeline settings; ``raw`` holds the fully merged mapping."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = Path(".")

    def __post_init__(self):
        r = self.raw
        if r["dataset"]["source"] not in ("synth", "csv"):
            raise ConfigError("dataset.source must be 'synth' or 'csv'")
        if r["dataset"]["standardize"] not in ("all", "train"):
            raise ConfigError("dataset.standardize must be 'all' or 'train'")
        for p in r["protocols"]["run"]:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r}; expected one of {PROTOCOLS}")
        try:
            self.acquisition_config()
            self.defense_config()
            attacks.AttackSpec(attacks.AttackKind(r["attacks"]["kinds"][0]), 0.1)
        except (ValueError, TypeError, IndexError) as exc:
            raise ConfigError(str(exc)) from None
        if r["selector"]["strategy"] not in acquisition.STRATEGIES:
            raise ConfigError(f"unknown selector.strategy {r['selector']['strategy']!r}")
        if not any(np.isclose(e, r["attacks"]["train_epsilon"]) for e in r["attacks"]["epsilons"]):
            raise ConfigError("attacks.train_epsilon must be one of attacks.epsilons")

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out(self) -> Path:
        p = Path(self.raw["out"])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    def section(self, name: str) -> Any:
        return self.raw[name]

    def train_config(self, seed: int) -> nnet.TrainConfig:
        n = self.raw["nnet"]
        return nnet.TrainConfig(epochs=n["epochs"], batch_size=n["batch_size"], learning_rate=n["learning_rate"],
                                hidden=tuple(n["hidden"]), seed=seed)

    def defense_config(self, seed: int = 0) -> defenses.DefenseConfig:
        d = dict(self.raw["defenses"])
        d["rslad_steps"] = tuple(d["rslad_steps"])
        return defenses.DefenseConfig(**d, train=self.train_config(seed))

    def acquisition_config(self, seed: int = 0) -> acquisition.AcquisitionConfig:
        a = dict(self.raw["acquisition"])
        a["budgets"] = tuple(a["budgets"])
        return acquisition.AcquisitionConfig(**a, seed=seed)

    def selector_hyper(self) -> dict:
        s = self.raw["selector"]
        return {k: s[k] for k in ("n_trees", "max_depth", "min_leaf", "max_features", "bootstrap")}

    def with_overrides(self, seed: int | None = None, workers: int | None = None, out: str | Path | None = None) -> "PipelineConfig":
        r = copy.deepcopy(self.raw)
        if seed is not None:
            r["seed"] = int(seed)
        if workers is not None:
            r["workers"] = int(workers)
        if out is not None:
            r["out"] = str(Path(out).resolve())
        return replace(self, raw=r)


def config_from_dict(d: dict | None, base_dir: str | Path = ".") -> PipelineConfig:
    return PipelineConfig(_merge(DEFAULTS, d or {}), Path(base_dir))


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(d, path.parent)


def default_config_yaml() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)


def stage_seed(global_seed: int, stage: str) -> int:
    """Per-stage seed derived from (global seed, stage name)."""
    h = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


# -- artifacts and manifest ---------------------------------------------------


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=str)


def _write_json_atomic(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


class Workspace:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"schema": ARTIFACT_SCHEMA, "stages": {}}
        return json.loads(self.manifest_path.read_text())

    def record(self, stage: str, input_hash: str, outputs: list[str]) -> None:
        m = self.manifest()
        m["stages"][stage] = {
            "input_hash": input_hash,
            "outputs": {o: file_hash(self.root / o) for o in sorted(outputs)},
        }
        _write_json_atomic(self.manifest_path, m)

    def verify(self, stage: str, required_by: str | None = None) -> dict:
        """Manifest entry of a completed stage whose outputs are intact."""
        entry = self.manifest()["stages"].get(stage)
        if entry is None:
            who = f"stage {required_by!r} requires" if required_by else "requires"
            raise DependencyError(f"{who} upstream stage {stage!r}; run `sage {stage}` first")
        for name, h in entry["outputs"].items():
            p = self.root / name
            if not p.exists():
                raise DependencyError(f"artifact {name} of stage {stage!r} is missing; rerun `sage {stage}`")
            if file_hash(p) != h:
                raise StaleArtifactError(f"artifact {name} of stage {stage!r} does not match its manifest hash; rerun `sage {stage}`")
        return entry

    @contextmanager
    def staging(self, stage: str):
        """Temporary directory whose files are moved into place on success."""
        tmp = Path(tempfile.mkdtemp(dir=self.root, prefix=f".tmp-{stage}-"))
        try:
            yield tmp
            for src in sorted(tmp.rglob("*")):
                if src.is_file():
                    dst = self.root / src.relative_to(tmp)
                    dst.parent.mkdir(parents=True, exist_ok=True)
                    os.replace(src, dst)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)


# -- stage bodies -------------------------------------------------------------


def _load_split(ws: Workspace):
    return data.load_dataset(ws.root / "data" / "train"), data.load_dataset(ws.root / "data" / "test")


def _suite_from_disk(ws: Workspace, test: data.Dataset) -> list[attacks.AdvDataset]:
    meta = json.loads((ws.root / "adv" / "suite.json").read_text())
    out = []
    for item in meta["datasets"]:
        spec = attacks.AttackSpec(item["attack"], item["epsilon"], meta["steps"], extras=item["extras"])
        seeds = attacks.sample_seeds(meta["seed"], spec.key, test.sample_ids)
        out.append(attacks.load_adv_csv(ws.root / "adv" / item["file"], test, spec, seeds, item["role"]))
    return out


def _train_pool(cfg: PipelineConfig, suite):
    return evaluation.split_suite(suite, cfg.raw["attacks"]["train_epsilon"])


def _stage_preprocess(cfg: PipelineConfig, ws: Workspace, tmp: Path, seed: int) -> list[str]:
    d = cfg.raw["dataset"]
    if d["source"] == "synth":
        s = d["synth"]
        ds = data.synth_generate(s["n"], s["d"], s["classes"], s["imbalance"], seed=seed,
                                 separation=s["separation"], label_noise=s["label_noise"])
    else:
        c = d["csv"]
        if not c["path"]:
            raise ConfigError("dataset.csv.path is required when dataset.source is 'csv'")
        path = Path(c["path"])
        path = path if path.is_absolute() else cfg.base_dir / path
        if not path.exists():
            raise ConfigError(f"dataset file not found: {path}")
        raw = data.load_csv(path, c["label_column"])
        if c["max_rows"] and raw.n_rows > c["max_rows"]:
            _, codes = np.unique(raw.labels, return_inverse=True)
            raw = raw.take(data.stratified_indices(codes, int(c["max_rows"]), np.random.default_rng(seed)))
        ds = data.preprocess(raw)
        if d["standardize"] == "train":
            fit, _ = data.split_indices(ds.y, data.SplitSpec(cfg.raw["split"]["train_fraction"], seed))
            ds = data.preprocess(raw, fit_index=fit)
    train, test = data.split(ds, data.SplitSpec(cfg.raw["split"]["train_fraction"], seed))
    (tmp / "data").mkdir()
    files = []
    for name, part in (("train", train), ("test", test)):
        files += [str(p.relative_to(tmp)) for p in data.save_dataset(part, tmp / "data" / name)]
    return files


def _stage_train_baseline(cfg, ws, tmp, seed):
    train, test = _load_split(ws)
    model = nnet.train(train, cfg.train_config(seed))
    acc = float((model.predict(test.X) == test.y).mean())
    model = model.with_params(model.weights, model.biases, test_accuracy=acc)
    nnet.save_model(model, tmp / "base_model.json")
    logger.info("baseline test accuracy %.4f", acc)
    return ["base_model.json"]


def _stage_attack(cfg, ws, tmp, seed):
    _, test = _load_split(ws)
    base = nnet.load_model(ws.root / "base_model.json")
    a = cfg.raw["attacks"]
    suite = attacks.generate_suite(base, test, a["kinds"], a["epsilons"], seed, a["train_epsilon"], a["steps"],
                                   a["extras"], a["freeze_categorical"])
    (tmp / "adv").mkdir()
    items, files = [], []
    for adv in suite:
        name = f"{adv.attack}_eps{adv.epsilon:g}.csv"
        attacks.save_adv_csv(adv, tmp / "adv" / name)
        items.append({"attack": adv.attack, "epsilon": adv.epsilon, "role": adv.role, "file": name,
                      "extras": adv.spec.extras})
        files.append(f"adv/{name}")
    (tmp / "adv" / "suite.json").write_text(json.dumps({"schema": ARTIFACT_SCHEMA, "seed": seed, "steps": a["steps"], "datasets": items}, indent=1))
    return files + ["adv/suite.json"]


def _stage_train_defenses(cfg, ws, tmp, seed):
    train, test = _load_split(ws)
    base = nnet.load_model(ws.root / "base_model.json")
    portfolio = defenses.train_portfolio(train, base, cfg.defense_config(seed), seed, eval_ds=test, workers=cfg.workers,
                                         freeze_categorical=cfg.raw["attacks"]["freeze_categorical"])
    defenses.save_portfolio(portfolio, tmp / "portfolio")
    return [f"portfolio/{p.name}" for p in sorted((tmp / "portfolio").iterdir())]


def _stage_matrix(cfg, ws, tmp, seed):
    _, test = _load_split(ws)
    portfolio = defenses.load_portfolio(ws.root / "portfolio")
    train_pool, _ = _train_pool(cfg, _suite_from_disk(ws, test))
    pm = build_matrix(portfolio, train_pool, expected_size=None)
    labels = label_optimal(pm, cfg.raw["evaluation"]["label_mode"])
    save_matrix(pm, labels, tmp / "matrix.csv", tmp / "side_table.csv")
    (tmp / "labels.json").write_text(json.dumps({"schema": ARTIFACT_SCHEMA, "labels": labels.tolist()}))
    return ["matrix.csv", "side_table.csv", "labels.json"]


def _load_labels(ws) -> np.ndarray:
    return np.array(json.loads((ws.root / "labels.json").read_text())["labels"], dtype=np.int64)


def _pool_matrix(cfg, ws):
    _, test = _load_split(ws)
    portfolio = defenses.load_portfolio(ws.root / "portfolio")
    suite = _suite_from_disk(ws, test)
    train_pool, test_pool = _train_pool(cfg, suite)
    return test, portfolio, suite, train_pool, test_pool, build_matrix(portfolio, train_pool, expected_size=None)


def _stage_acquire(cfg, ws, tmp, seed):
    *_, pm = _pool_matrix(cfg, ws)
    labels = _load_labels(ws)
    s = cfg.raw["selector"]
    acfg = cfg.acquisition_config(seed)
    if s["budget"] < 1.0 and s["budget"] not in acfg.budgets:
        acfg = replace(acfg, budgets=tuple(sorted(set(acfg.budgets) | {s["budget"]})))
    res = acquisition.acquire(pm.X, labels, acfg, s["strategy"])
    subsets = {repr(b): pm.sample_ids[idx].tolist() for b, idx in res.subsets.items()}
    index = {repr(b): idx.tolist() for b, idx in res.subsets.items()}
    (tmp / "acquisition.json").write_text(json.dumps({"schema": ARTIFACT_SCHEMA, "strategy": s["strategy"],
                                                      "pool_index": index, "sample_ids": subsets}))
    with (tmp / "acquisition_trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "budget", "sample_id", "attack", "s_c", "s_d", "s"])
        for t in res.trace:
            w.writerow([t["round"], t["budget"], int(pm.sample_ids[t["index"]]), pm.attacks[t["index"]],
                        repr(t["s_c"]), repr(t["s_d"]), repr(t["s"])])
    return ["acquisition.json", "acquisition_trace.csv"]


def _selected_index(cfg, ws, n: int) -> np.ndarray:
    budget = cfg.raw["selector"]["budget"]
    if budget >= 1.0:
        return np.arange(n)
    return np.array(json.loads((ws.root / "acquisition.json").read_text())["pool_index"][repr(budget)], dtype=np.int64)


def _stage_train_selector(cfg, ws, tmp, seed):
    *_, pm = _pool_matrix(cfg, ws)
    labels = _load_labels(ws)
    idx = _selected_index(cfg, ws, pm.n_samples)
    portfolio = defenses.load_portfolio(ws.root / "portfolio")
    forest = evaluation.fit_selector(pm.X[idx], labels[idx], portfolio, {**cfg.selector_hyper(), "seed": seed}, seed)
    if isinstance(forest, evaluation.ConstantSelector):
        raise PipelineError("selector training set holds a single defense class; raise selector.budget")
    selector.save_forest(forest, tmp / "selector.json")
    return ["selector.json"]


def _policies(cfg, seed) -> list[evaluation.Policy]:
    e = cfg.raw["evaluation"]
    return [evaluation.Policy(k, runs=e["random_runs"], neighbors=e["neighbors"], seed=seed) for k in evaluation.ALL_POLICIES]


def _stage_eval(cfg, ws, tmp, seed):
    test, portfolio, suite, train_pool, test_pool, pm = _pool_matrix(cfg, ws)
    base = nnet.load_model(ws.root / "base_model.json")
    labels = _load_labels(ws)
    idx = _selected_index(cfg, ws, pm.n_samples)
    forest = selector.load_forest(ws.root / "selector.json")
    s = cfg.raw["selector"]
    state = evaluation.SelectionState(pm, labels, idx, forest, evaluation.best_static_defense(pm), s["budget"], s["strategy"])
    ctx = evaluation.EvalContext(portfolio, base, state)
    policies = _policies(cfg, seed)
    train_eps = cfg.raw["attacks"]["train_epsilon"]
    report = evaluation.evaluate(ctx, test_pool, test, policies,
                                 {"train_epsilon": float(train_eps), "excluded": [], "seed": cfg.seed})
    X = np.vstack([a.X_adv for a in test_pool])
    y = np.concatenate([a.y for a in test_pool])
    ids = np.concatenate([a.sample_ids for a in test_pool])
    order = np.random.default_rng(seed).permutation(len(y))
    report.timing = evaluation.timing_report(ctx, X[order], y[order], ids[order], evaluation.ALL_POLICIES,
                                             cfg.raw["evaluation"]["timing_samples"], seed)
    p = cfg.raw["protocols"]
    acfg = cfg.acquisition_config(stage_seed(cfg.seed, "acquire"))
    hyper = {**cfg.selector_hyper(), "seed": stage_seed(cfg.seed, "train-selector")}
    if "exclusion" in p["run"]:
        tiers = p["exclusion_tiers"] or evaluation.default_exclusion_tiers(report, p["n_tiers"])
        reports = evaluation.exclusion_protocol(portfolio, base, suite, test, acfg, tiers, hyper, s["budget"], train_eps, policies)
        report.extras["exclusion"] = {k: r.to_dict(include_timing=False) for k, r in reports.items()}
    if "al_ablation" in p["run"]:
        report.extras["al_ablation"] = evaluation.al_ablation(portfolio, base, suite, None, acfg, hyper, p["al_strategies"], train_eps)
    (tmp / "report.json").write_text(report.to_json())
    return ["report.json"]


def _stage_report(cfg, ws, tmp, seed):
    rep = json.loads((ws.root / "report.json").read_text())
    report = evaluation.report_from_dict(rep)
    (tmp / "tables").mkdir()
    report.write_csv(tmp / "tables" / "macro_f1.csv", "macro_f1")
    report.write_csv(tmp / "tables" / "score.csv", "score")
    files = ["tables/macro_f1.csv", "tables/score.csv"]
    if rep.get("timing"):
        with (tmp / "tables" / "timing.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["policy", "ms_per_sample", "defense_calls_per_sample", "selector_calls_per_sample"])
            for k, v in rep["timing"].items():
                w.writerow([k, f"{v['ms_per_sample']:.6f}", v["defense_calls_per_sample"], v["selector_calls_per_sample"]])
        files.append("tables/timing.csv")
    if rep.get("extras", {}).get("al_ablation"):
        with (tmp / "tables" / "al_ablation.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["strategy", "budget", "labeled", "macro_f1", "score", "selector_accuracy"])
            for r in rep["extras"]["al_ablation"]:
                w.writerow([r["strategy"], r["budget"], r["labeled"], f"{r['macro_f1']:.6f}", f"{r['score']:.6f}", f"{r['selector_accuracy']:.6f}"])
        files.append("tables/al_ablation.csv")
    if rep.get("extras", {}).get("exclusion"):
        with (tmp / "tables" / "exclusion.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            tiers = rep["extras"]["exclusion"]
            attacks_ = list(next(iter(tiers.values()))["policies"]["SAGE"]["attacks"])
            w.writerow(["excluded", *attacks_, "Average"])
            for k, r in tiers.items():
                sage = r["policies"]["SAGE"]
                w.writerow([k, *(f"{sage['attacks'][a]['macro_f1']:.6f}" for a in attacks_), f"{sage['average']['macro_f1']:.6f}"])
        files.append("tables/exclusion.csv")
    return files


BODIES = {
    "preprocess": _stage_preprocess,
    "train-baseline": _stage_train_baseline,
    "attack": _stage_attack,
    "train-defenses": _stage_train_defenses,
    "matrix": _stage_matrix,
    "acquire": _stage_acquire,
    "train-selector": _stage_train_selector,
    "eval": _stage_eval,
    "report": _stage_report,
}


def _lookup(raw: dict, dotted: str) -> Any:
    for part in dotted.split("."):
        raw = raw[part]
    return raw


def _input_hash(cfg: PipelineConfig, stage: str, upstream: dict[str, dict]) -> str:
    key = {
        "stage": stage,
        "seed": stage_seed(cfg.seed, stage),
        "config": {s: _lookup(cfg.raw, s) for s in SECTIONS[stage]},
        "upstream": {u: upstream[u]["outputs"] for u in UPSTREAM[stage]},
    }
    return hashlib.sha256(_canonical(key).encode()).hexdigest()


def run_stage(stage: str, cfg: PipelineConfig, force: bool = False) -> bool:
    """Run one stage; returns False when it was skipped as up to date."""
    if stage not in BODIES:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGES}")
    ws = Workspace(cfg.out)
    upstream = {u: ws.verify(u, required_by=stage) for u in UPSTREAM[stage]}
    h = _input_hash(cfg, stage, upstream)
    done = ws.manifest()["stages"].get(stage)
    if not force and done and done["input_hash"] == h:
        try:
            ws.verify(stage)
            logger.info("stage %s is up to date; skipped", stage)
            return False
        except (DependencyError, StaleArtifactError):
            pass
    logger.info("running stage %s", stage)
    with ws.staging(stage) as tmp:
        outputs = BODIES[stage](cfg, ws, tmp, stage_seed(cfg.seed, stage))
    ws.record(stage, h, outputs)
    return True


def run_all(cfg: PipelineConfig, force: bool = False) -> evaluation.EvalReport:
    for stage in STAGES:
        run_stage(stage, cfg, force)
    return evaluation.report_from_dict(json.loads((cfg.out / "report.json").read_text()))
