"""Dispatch policies, scoring, robustness protocols and timing.

Every policy maps each adversarial test sample to one defense (or to the
undefended base model). A dataset is scored two ways: Macro-F1 of the
dispatched predictions, and the weighted Score, which credits each defense
with the Macro-F1 it earns on the samples routed to it. Per-attack rows
average over the test epsilons; the cross-attack Average is the mean of the
per-attack rows.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import acquisition, selector
from .attacks import TRAIN_EPSILON, AdvDataset
from .data import Dataset
from .defenses import DefenseId, DefenseModel, defended_predict
from .matrix import PerformanceMatrix, build_matrix, label_optimal
from .metrics import assignment_score, macro_f1, weighted_score
from .nnet import NeuralModel

logger = logging.getLogger(__name__)

__all__ = [
    "macro_f1", "weighted_score", "PolicyKind", "Policy", "SelectionState", "EvalContext", "EvalReport",
    "build_selection", "evaluate", "evaluate_policy", "epsilon_shift_protocol", "exclusion_protocol",
    "default_exclusion_tiers", "al_ablation", "timing_report", "OracleDominanceError", "report_from_dict",
]

SCHEMA_ID = "sage_ids.report/1"
NO_DEFENSE_ID = -1
CLEAN = "clean"


class PolicyKind(str, Enum):
    SAGE = "SAGE"
    ORACLE = "ORACLE"
    DYNAMIC_RECOMMEND = "DYNAMIC_RECOMMEND"
    BEST_STATIC = "BEST_STATIC"
    RANDOM = "RANDOM"
    NO_DEFENSE = "NO_DEFENSE"


ALL_POLICIES = tuple(PolicyKind)


@dataclass(frozen=True)
class Policy:
    kind: PolicyKind
    runs: int = 100
    neighbors: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.kind is PolicyKind.RANDOM and self.runs < 1:
            raise ValueError("RANDOM needs run count >= 1")
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")


class OracleDominanceError(AssertionError):
    pass


@dataclass(frozen=True, eq=False)
class SelectionState:
    """Everything learned from the attack-train pool."""

    matrix: PerformanceMatrix
    labels: np.ndarray
    labeled_index: np.ndarray
    forest: selector.TreeEnsemble | None
    best_static: DefenseId
    budget: float
    strategy: str


@dataclass(frozen=True, eq=False)
class EvalContext:
    portfolio: Sequence[DefenseModel]
    base: NeuralModel
    selection: SelectionState


@dataclass(frozen=True, eq=False)
class _Block:
    attack: str
    epsilon: float
    X: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    preds: np.ndarray  # (n, n_defenses)
    base_pred: np.ndarray


@dataclass
class DatasetResult:
    attack: str
    epsilon: float
    macro_f1: float
    score: float
    assign: np.ndarray  # (n,) or (runs, n)
    correct: np.ndarray  # same shape as assign
    macro_f1_se: float | None = None
    score_se: float | None = None


@dataclass
class EvalReport:
    policies: dict[str, list[DatasetResult]]
    meta: dict = field(default_factory=dict)
    timing: dict | None = None
    extras: dict = field(default_factory=dict)

    def attack_rows(self, policy: str) -> dict[str, dict[str, float]]:
        """Per-attack means over test epsilons (clean excluded)."""
        out: dict[str, dict[str, list[float]]] = {}
        for r in self.policies[policy]:
            if r.attack == CLEAN:
                continue
            acc = out.setdefault(r.attack, {"macro_f1": [], "score": []})
            acc["macro_f1"].append(r.macro_f1)
            acc["score"].append(r.score)
        return {a: {k: float(np.mean(v)) for k, v in m.items()} for a, m in out.items()}

    def average(self, policy: str) -> dict[str, float]:
        rows = self.attack_rows(policy)
        return {k: float(np.mean([r[k] for r in rows.values()])) for k in ("macro_f1", "score")}

    def clean(self, policy: str) -> dict[str, float] | None:
        for r in self.policies[policy]:
            if r.attack == CLEAN:
                return {"macro_f1": r.macro_f1, "score": r.score}
        return None

    def to_dict(self, include_timing: bool = True) -> dict:
        pol = {}
        for name, results in self.policies.items():
            pol[name] = {
                "datasets": [
                    {k: v for k, v in {
                        "attack": r.attack, "epsilon": r.epsilon, "macro_f1": r.macro_f1, "score": r.score,
                        "macro_f1_se": r.macro_f1_se, "score_se": r.score_se,
                    }.items() if v is not None}
                    for r in results
                ],
                "attacks": self.attack_rows(name),
                "average": self.average(name),
                "clean": self.clean(name),
            }
        d = {"schema": SCHEMA_ID, "meta": self.meta, "policies": pol}
        if self.extras:
            d["extras"] = self.extras
        if include_timing and self.timing is not None:
            d["timing"] = self.timing
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def write_csv(self, path: str | Path, metric: str = "macro_f1") -> None:
        """Table layout: one row per attack plus Average and Clean, one column per policy."""
        names = list(self.policies)
        rows = {n: self.attack_rows(n) for n in names}
        attacks = list(rows[names[0]])
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", *names])
            for a in attacks:
                w.writerow([a, *(f"{rows[n][a][metric]:.6f}" for n in names)])
            w.writerow(["Average", *(f"{self.average(n)[metric]:.6f}" for n in names)])
            if self.clean(names[0]) is not None:
                w.writerow(["Clean", *(f"{self.clean(n)[metric]:.6f}" for n in names)])


def report_from_dict(d: dict) -> EvalReport:
    """Rebuild the scored rows of a serialized report (per-sample assignments are not stored)."""
    if d.get("schema") != SCHEMA_ID:
        raise ValueError(f"unknown report schema {d.get('schema')!r}")
    empty = np.empty(0, dtype=np.int64)
    pol = {
        name: [DatasetResult(r["attack"], r["epsilon"], r["macro_f1"], r["score"], empty, empty.astype(bool),
                             r.get("macro_f1_se"), r.get("score_se")) for r in body["datasets"]]
        for name, body in d["policies"].items()
    }
    rank = {k.value: i for i, k in enumerate(ALL_POLICIES)}
    pol = dict(sorted(pol.items(), key=lambda kv: rank.get(kv[0], len(rank))))
    return EvalReport(pol, d.get("meta", {}), d.get("timing"), d.get("extras", {}))


# -- selection machinery ----------------------------------------------------


def best_static_defense(pm: PerformanceMatrix) -> DefenseId:
    """Defense with the highest mean per-attack Macro-F1 on the pool; ties go to the lower id."""
    attacks = sorted(set(pm.attacks))
    f1 = np.zeros(len(pm.defense_ids))
    for a in attacks:
        sel = pm.attacks == a
        f1 += [macro_f1(pm.y[sel], pm.predictions[sel, j], pm.class_count) for j in range(len(pm.defense_ids))]
    return pm.defense_ids[int(np.argmax(f1))]


def build_selection(
    portfolio: Sequence[DefenseModel],
    train_pool: Sequence[AdvDataset],
    acq_cfg: acquisition.AcquisitionConfig,
    selector_hyper: dict | None = None,
    budget: float = 0.5,
    strategy: str = "eoal",
    label_mode: str = "indicator",
) -> SelectionState:
    """Matrix, optimal labels, labeled subset and fitted selector from ``train_pool``."""
    if not train_pool:
        raise ValueError("attack-train pool is empty")
    pm = build_matrix(portfolio, train_pool, expected_size=None)
    labels = label_optimal(pm, label_mode)
    if budget >= 1.0:
        idx = np.arange(pm.n_samples)
    else:
        cfg = acq_cfg if budget in acq_cfg.budgets else _with_budget(acq_cfg, budget)
        idx = acquisition.acquire(pm.X, labels, cfg, strategy).subsets[budget]
    forest = fit_selector(pm.X[idx], labels[idx], portfolio, selector_hyper, acq_cfg.seed)
    return SelectionState(pm, labels, idx, forest, best_static_defense(pm), budget, strategy)


def _with_budget(cfg: acquisition.AcquisitionConfig, budget: float) -> acquisition.AcquisitionConfig:
    from dataclasses import replace

    return replace(cfg, budgets=tuple(sorted(set(cfg.budgets) | {budget})))


class ConstantSelector:
    """Stand-in when the labeled subset holds a single defense class."""

    def __init__(self, did: int):
        self.did = int(did)

    def predict(self, X):
        return np.full(len(np.atleast_2d(X)), self.did)

    def predict_one(self, x):
        return self.did


def fit_selector(X, labels, portfolio, hyper: dict | None, seed: int):
    classes = [int(d.id) for d in portfolio]
    if len(np.unique(labels)) < 2 or len(labels) < 10:
        logger.warning("selector training set is degenerate (%d rows, %d classes); using a constant choice",
                       len(labels), len(np.unique(labels)))
        return ConstantSelector(np.bincount(labels).argmax())
    hyper = dict(hyper or {})
    hyper.setdefault("seed", seed)
    return selector.fit(X, labels, classes=classes, **hyper)


# -- evaluation -------------------------------------------------------------


def _blocks(ctx: EvalContext, suite: Sequence[AdvDataset], clean: Dataset | None) -> list[_Block]:
    out = []
    items = [(a.attack, a.epsilon, a.X_adv, a.y, a.sample_ids) for a in suite]
    if clean is not None:
        items.append((CLEAN, 0.0, clean.X, clean.y, clean.sample_ids))
    for attack, eps, X, y, ids in items:
        preds = np.stack([defended_predict(dm, X, ids) for dm in ctx.portfolio], axis=1)
        out.append(_Block(attack, float(eps), X, y, ids, preds, ctx.base.predict(X)))
    return out


def _side_f1(blocks: list[_Block], C: int) -> np.ndarray:
    y = np.concatenate([b.y for b in blocks])
    P = np.concatenate([b.preds for b in blocks])
    return np.array([macro_f1(y, P[:, j], C) for j in range(P.shape[1])])


def _oracle_columns(block: _Block, side: np.ndarray) -> np.ndarray:
    order = np.argsort(-side, kind="stable")
    ok = (block.preds == block.y[:, None])[:, order]
    return order[np.where(ok.any(axis=1), ok.argmax(axis=1), 0)]


def _assign_columns(policy: Policy, ctx: EvalContext, block: _Block, side: np.ndarray, nn: cKDTree | None) -> np.ndarray:
    """Portfolio column per sample, ``NO_DEFENSE_ID`` for the base model, or (runs, n) for RANDOM."""
    sel = ctx.selection
    col_of = {int(d.id): j for j, d in enumerate(ctx.portfolio)}
    n = len(block.y)
    k = policy.kind
    if k is PolicyKind.NO_DEFENSE:
        return np.full(n, NO_DEFENSE_ID)
    if k is PolicyKind.ORACLE:
        return _oracle_columns(block, side)
    if k is PolicyKind.BEST_STATIC:
        return np.full(n, col_of[int(sel.best_static)])
    if k is PolicyKind.DYNAMIC_RECOMMEND:
        _, idx = nn.query(block.X, k=policy.neighbors, p=1)
        lab = sel.labels[sel.labeled_index][np.asarray(idx).reshape(n, -1)]
        if lab.shape[1] == 1:
            chosen = lab[:, 0]
        else:
            chosen = np.array([np.bincount(r, minlength=max(col_of) + 1).argmax() for r in lab])
        return np.array([col_of[int(c)] for c in chosen])
    if k is PolicyKind.SAGE:
        if sel.forest is None:
            raise ValueError("SAGE requires a fitted selector")
        return np.array([col_of[int(c)] for c in sel.forest.predict(block.X)])
    raise ValueError(f"unknown policy {k}")


def _score_assignment(cols: np.ndarray, block: _Block, C: int, n_def: int) -> tuple[float, float, np.ndarray]:
    if cols[0] == NO_DEFENSE_ID and np.all(cols == NO_DEFENSE_ID):
        pred = block.base_pred
        f1 = macro_f1(block.y, pred, C)
        return f1, f1, pred == block.y
    pred = block.preds[np.arange(len(cols)), cols]
    return macro_f1(block.y, pred, C), assignment_score(cols, block.y, pred, C, n_def), pred == block.y


def _stable_hash_seed(block: _Block) -> int:
    import zlib

    return zlib.crc32(f"{block.attack}:{block.epsilon!r}".encode())


def evaluate_policy(policy: Policy, ctx: EvalContext, blocks: list[_Block], side: np.ndarray) -> list[DatasetResult]:
    C = ctx.base.n_classes
    n_def = len(ctx.portfolio)
    sel = ctx.selection
    nn = None
    if policy.kind is PolicyKind.DYNAMIC_RECOMMEND:
        nn = cKDTree(sel.matrix.X[sel.labeled_index])
    out = []
    for b in blocks:
        if policy.kind is PolicyKind.RANDOM:
            rng = np.random.default_rng([policy.seed, _stable_hash_seed(b)])
            cols = rng.integers(0, n_def, size=(policy.runs, len(b.y)))
            scored = [_score_assignment(c, b, C, n_def) for c in cols]
            f1s = np.array([s[0] for s in scored])
            scs = np.array([s[1] for s in scored])
            se = lambda v: float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0  # noqa: E731
            out.append(DatasetResult(b.attack, b.epsilon, float(f1s.mean()), float(scs.mean()), cols,
                                     np.stack([s[2] for s in scored]), se(f1s), se(scs)))
        else:
            cols = _assign_columns(policy, ctx, b, side, nn)
            f1, sc, ok = _score_assignment(cols, b, C, n_def)
            out.append(DatasetResult(b.attack, b.epsilon, f1, sc, cols, ok))
    return out


def dominance_violations(results: dict[str, list[DatasetResult]]) -> dict[str, int]:
    """Per policy, the number of samples it handles correctly while the ORACLE does not."""
    oracle = results[PolicyKind.ORACLE.value]
    out = {}
    for name, res in results.items():
        bad = 0
        for o, r in zip(oracle, res):
            ok = np.atleast_2d(r.correct)
            bad += int(np.any(ok & ~o.correct[None, :], axis=0).sum())
        out[name] = bad
    return out


def check_oracle_dominance(results: dict[str, list[DatasetResult]]) -> dict[str, int]:
    """Raise unless the ORACLE's correct set contains that of every portfolio policy.

    NO_DEFENSE runs the undefended base model, which lies outside the
    portfolio, so its count is returned but not enforced.
    """
    v = dominance_violations(results)
    for name, bad in v.items():
        if bad and name != PolicyKind.NO_DEFENSE.value:
            raise OracleDominanceError(f"{name} is correct on {bad} samples where ORACLE is not")
    return v


def evaluate(
    ctx: EvalContext,
    suite: Sequence[AdvDataset],
    clean: Dataset | None = None,
    policies: Sequence[Policy] | None = None,
    meta: dict | None = None,
) -> EvalReport:
    """Score every policy on ``suite`` (plus the clean test set) and check oracle dominance."""
    policies = list(policies) if policies is not None else [Policy(k) for k in ALL_POLICIES]
    if not any(p.kind is PolicyKind.ORACLE for p in policies):
        policies.append(Policy(PolicyKind.ORACLE))
    if len({int(d.id) for d in ctx.portfolio}) != len(ctx.portfolio):
        raise ValueError("portfolio has duplicate defense ids")
    blocks = _blocks(ctx, suite, clean)
    C = ctx.base.n_classes
    attack_blocks = [b for b in blocks if b.attack != CLEAN]
    side = _side_f1(attack_blocks or blocks, C)
    results = {p.kind.value: evaluate_policy(p, ctx, blocks, side) for p in policies}
    violations = check_oracle_dominance(results)
    m = {
        "row_aggregation": "mean over test epsilons",
        "test_epsilons": sorted({b.epsilon for b in attack_blocks}),
        "selector_budget": ctx.selection.budget,
        "acquisition_strategy": ctx.selection.strategy,
        "best_static": ctx.selection.best_static.name,
        "train_pool_size": int(ctx.selection.matrix.n_samples),
        "labeled": int(len(ctx.selection.labeled_index)),
        "oracle_dominance_violations": violations,
    }
    m.update(meta or {})
    ordered = {p.kind.value: results[p.kind.value] for p in sorted(policies, key=lambda p: ALL_POLICIES.index(p.kind))}
    return EvalReport(ordered, m)


# -- protocols --------------------------------------------------------------


def split_suite(suite: Sequence[AdvDataset], train_epsilon: float = TRAIN_EPSILON):
    train = [a for a in suite if np.isclose(a.epsilon, train_epsilon)]
    test = [a for a in suite if not np.isclose(a.epsilon, train_epsilon)]
    return train, test


def epsilon_shift_protocol(
    portfolio: Sequence[DefenseModel],
    base: NeuralModel,
    suite: Sequence[AdvDataset],
    clean: Dataset | None,
    acq_cfg: acquisition.AcquisitionConfig,
    selector_hyper: dict | None = None,
    budget: float = 0.5,
    train_epsilon: float = TRAIN_EPSILON,
    policies: Sequence[Policy] | None = None,
    exclude: Sequence[str] = (),
) -> tuple[EvalReport, EvalContext]:
    """Selection machinery from the ``train_epsilon`` datasets, evaluation at every other epsilon."""
    train, test = split_suite(suite, train_epsilon)
    if not train:
        raise ValueError(f"suite has no datasets at the training epsilon {train_epsilon}")
    if not test:
        raise ValueError("suite has no datasets at unseen epsilons")
    kinds = {a.attack for a in suite}
    exclude = sorted({str(getattr(e, "value", e)) for e in exclude})
    if set(exclude) - kinds:
        raise ValueError(f"excluded kinds not in suite: {sorted(set(exclude) - kinds)}")
    if set(exclude) >= kinds:
        raise ValueError("cannot exclude every attack kind")
    train = [a for a in train if a.attack not in exclude]
    state = build_selection(portfolio, train, acq_cfg, selector_hyper, budget)
    ctx = EvalContext(portfolio, base, state)
    report = evaluate(ctx, test, clean, policies, {"train_epsilon": float(train_epsilon), "excluded": exclude})
    return report, ctx


def default_exclusion_tiers(report: EvalReport, n_tiers: int = 3) -> list[list[str]]:
    """Single-kind tiers for the kinds that hurt the undefended model most."""
    rows = report.attack_rows(PolicyKind.NO_DEFENSE.value)
    order = sorted(rows, key=lambda a: (rows[a]["macro_f1"], a))
    return [[a] for a in order[:n_tiers]]


def exclusion_protocol(
    portfolio, base, suite, clean, acq_cfg, tiers: Sequence[Sequence[str]], selector_hyper=None, budget: float = 0.5,
    train_epsilon: float = TRAIN_EPSILON, policies=None,
) -> dict[str, EvalReport]:
    """One report per tier (key ``"+".join(tier)``), plus the no-exclusion baseline under ``"none"``."""
    out = {"none": epsilon_shift_protocol(portfolio, base, suite, clean, acq_cfg, selector_hyper, budget, train_epsilon, policies)[0]}
    for tier in tiers:
        key = "+".join(tier) if tier else "none"
        if key in out:
            continue
        out[key] = epsilon_shift_protocol(portfolio, base, suite, clean, acq_cfg, selector_hyper, budget,
                                          train_epsilon, policies, exclude=tier)[0]
    return out


def al_ablation(
    portfolio, base, suite, clean, acq_cfg: acquisition.AcquisitionConfig, selector_hyper=None,
    strategies: Sequence[str] = acquisition.STRATEGIES, train_epsilon: float = TRAIN_EPSILON,
    include_full: bool = True,
) -> list[dict]:
    """SAGE Average for every (strategy, budget), plus full supervision."""
    train, test = split_suite(suite, train_epsilon)
    pm = build_matrix(portfolio, train, expected_size=None)
    labels = label_optimal(pm)
    best = best_static_defense(pm)
    rows = []
    policies = [Policy(PolicyKind.SAGE), Policy(PolicyKind.ORACLE)]
    blocks_ctx = EvalContext(portfolio, base, SelectionState(pm, labels, np.arange(pm.n_samples), None, best, 1.0, "full"))
    blocks = _blocks(blocks_ctx, test, None)
    side = _side_f1(blocks, base.n_classes)

    def run(idx, budget, strategy):
        forest = fit_selector(pm.X[idx], labels[idx], portfolio, selector_hyper, acq_cfg.seed)
        ctx = EvalContext(portfolio, base, SelectionState(pm, labels, idx, forest, best, budget, strategy))
        res = {p.kind.value: evaluate_policy(p, ctx, blocks, side) for p in policies}
        check_oracle_dominance(res)
        rep = EvalReport(res)
        avg = rep.average(PolicyKind.SAGE.value)
        acc = float((forest.predict(pm.X) == labels).mean())
        return {"strategy": strategy, "budget": budget, "labeled": int(len(idx)), "macro_f1": avg["macro_f1"],
                "score": avg["score"], "selector_accuracy": acc}

    for strategy in strategies:
        res = acquisition.acquire(pm.X, labels, acq_cfg, strategy)
        for b, idx in res.subsets.items():
            rows.append(run(idx, b, strategy))
    if include_full:
        rows.append(run(np.arange(pm.n_samples), 1.0, "full"))
    return rows


# -- timing -----------------------------------------------------------------


class CallCounter:
    def __init__(self, fn: Callable):
        self.fn = fn
        self.calls = 0

    def __call__(self, *a, **kw):
        self.calls += 1
        return self.fn(*a, **kw)


def timing_report(
    ctx: EvalContext,
    X: np.ndarray,
    y: np.ndarray,
    ids: np.ndarray,
    policies: Sequence[PolicyKind] = (PolicyKind.SAGE, PolicyKind.ORACLE),
    max_samples: int = 1000,
    seed: int = 0,
    chunk: int = 50,
) -> dict[str, dict[str, float]]:
    """Per-sample wall-clock cost of dispatch plus defended inference.

    Runs serially, one sample at a time, after a warm-up pass. ORACLE
    enumerates the full portfolio for every sample and then picks in
    hindsight. Also reports defended-inference and selector calls per sample.
    """
    if len(y) == 0:
        raise ValueError("timing needs at least one sample")
    n = min(len(y), max_samples)
    X = np.ascontiguousarray(X[:n], dtype=np.float64)
    y, ids = y[:n], ids[:n]
    portfolio = list(ctx.portfolio)
    by_id = {int(d.id): d for d in portfolio}
    sel = ctx.selection
    side_order = np.argsort(-sel.matrix.side_f1, kind="stable")
    nn = cKDTree(sel.matrix.X[sel.labeled_index])
    nn_labels = sel.labels[sel.labeled_index]
    rng = np.random.default_rng(seed)
    rand_cols = rng.integers(0, len(portfolio), size=n)
    static = by_id[int(sel.best_static)]

    def make(kind: PolicyKind, dp: CallCounter, pick: CallCounter):
        if kind is PolicyKind.SAGE:
            return lambda i: dp(by_id[pick(X[i])], X[i], ids[i])
        if kind is PolicyKind.ORACLE:
            def oracle(i):
                preds = [dp(d, X[i], ids[i]) for d in portfolio]
                for j in side_order:
                    if preds[j] == y[i]:
                        return preds[j]
                return preds[side_order[0]]
            return oracle
        if kind is PolicyKind.BEST_STATIC:
            return lambda i: dp(static, X[i], ids[i])
        if kind is PolicyKind.RANDOM:
            return lambda i: dp(portfolio[rand_cols[i]], X[i], ids[i])
        if kind is PolicyKind.DYNAMIC_RECOMMEND:
            return lambda i: dp(by_id[int(nn_labels[pick(X[i])])], X[i], ids[i])
        if kind is PolicyKind.NO_DEFENSE:
            return lambda i: int(ctx.base.predict(X[i])[0])
        raise ValueError(kind)

    runners = {}
    for kind in map(PolicyKind, policies):
        if kind is PolicyKind.SAGE:
            pick_fn = sel.forest.predict_one
        elif kind is PolicyKind.DYNAMIC_RECOMMEND:
            pick_fn = lambda x: nn.query(x, k=1, p=1)[1]  # noqa: E731
        else:
            pick_fn = lambda x: None  # noqa: E731
        dp, pick = CallCounter(defended_predict), CallCounter(pick_fn)
        fn = make(kind, dp, pick)
        for i in range(min(n, 50)):  # warm-up
            fn(i)
        dp.calls = pick.calls = 0
        runners[kind] = (fn, dp, pick)

    # policies alternate over sample chunks so that load drift hits all of them
    elapsed = dict.fromkeys(runners, 0.0)
    for lo in range(0, n, chunk):
        for kind, (fn, _, _) in runners.items():
            t0 = time.perf_counter()
            for i in range(lo, min(lo + chunk, n)):
                fn(i)
            elapsed[kind] += time.perf_counter() - t0
    out = {}
    for kind, (fn, dp, pick) in runners.items():
        out[kind.value] = {
            "ms_per_sample": elapsed[kind] / n * 1e3,
            "defense_calls_per_sample": dp.calls / n,
            "selector_calls_per_sample": pick.calls / n if kind in (PolicyKind.SAGE, PolicyKind.DYNAMIC_RECOMMEND) else 0.0,
            "samples": n,
        }
    return out
