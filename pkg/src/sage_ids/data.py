"""Tabular intrusion data: CSV ingestion, preprocessing, splitting, synthetic corpora.

Everything downstream consumes a :class:`Dataset`: a standardized float64
feature matrix, integer labels and the per-feature box ``[feature_lo,
feature_hi]`` that attacks must respect.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "?"})
SCHEMA_ID = "sage_ids.dataset/1"


class DataError(ValueError):
    """Raised for malformed input tables or invalid dataset operations."""


@dataclass(frozen=True)
class RawTable:
    """Parsed CSV contents.

    ``columns`` maps every feature column name to either a float array
    (numeric) or an object array of strings (categorical).
    """

    columns: dict[str, np.ndarray]
    labels: np.ndarray
    label_column: str
    dropped_rows: int = 0

    def __post_init__(self):
        n = len(self.labels)
        for name, col in self.columns.items():
            if len(col) != n:
                raise DataError(f"column {name!r} has {len(col)} rows, expected {n}")
        if len(np.unique(self.labels)) < 2:
            raise DataError("at least 2 classes are required")

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @property
    def feature_names(self) -> list[str]:
        return list(self.columns)

    def is_numeric(self, name: str) -> bool:
        return self.columns[name].dtype.kind == "f"

    def take(self, index: np.ndarray) -> "RawTable":
        return RawTable(
            {k: v[index] for k, v in self.columns.items()},
            self.labels[index],
            self.label_column,
            self.dropped_rows,
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_lo: np.ndarray
    feature_hi: np.ndarray
    class_count: int
    feature_meta: tuple[str, ...]
    feature_names: tuple[str, ...] = ()
    class_names: tuple[str, ...] = ()
    sample_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] < 1:
            raise DataError("X must be a 2-d matrix with at least one feature")
        if len(y) != len(X):
            raise DataError("X and y row counts differ")
        if self.class_count < 2:
            raise DataError("class_count must be >= 2")
        if len(y) and (y.min() < 0 or y.max() >= self.class_count):
            raise DataError("labels out of range")
        lo = np.asarray(self.feature_lo, dtype=np.float64)
        hi = np.asarray(self.feature_hi, dtype=np.float64)
        if lo.shape != (X.shape[1],) or hi.shape != (X.shape[1],):
            raise DataError("bounds must have one entry per feature")
        ids = np.arange(len(y)) if self.sample_ids is None else np.asarray(self.sample_ids, dtype=np.int64)
        names = self.feature_names or tuple(f"f{i}" for i in range(X.shape[1]))
        classes = self.class_names or tuple(str(c) for c in range(self.class_count))
        for arr in (X, y, lo, hi, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_lo", lo)
        object.__setattr__(self, "feature_hi", hi)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "feature_names", tuple(names))
        object.__setattr__(self, "class_names", tuple(classes))
        object.__setattr__(self, "feature_meta", tuple(self.feature_meta))

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def continuous_mask(self) -> np.ndarray:
        return np.array([m == "continuous" for m in self.feature_meta])

    def subset(self, index: np.ndarray) -> "Dataset":
        index = np.asarray(index)
        return replace(self, X=self.X[index], y=self.y[index], sample_ids=self.sample_ids[index])

    def with_X(self, X: np.ndarray) -> "Dataset":
        return replace(self, X=X)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DataError("train_fraction must lie in (0, 1)")


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parse_float(cell: str) -> float | None:
    try:
        return float(cell)
    except ValueError:
        return None


def load_csv(path: str | Path, label_column: str) -> RawTable:
    """Read a header-first CSV into a :class:`RawTable`.

    A column is numeric when most of its non-missing cells parse as floats;
    a stray unparseable cell in such a column is an error. Rows holding
    missing cells are dropped and counted.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column not in header:
            raise DataError(f"label column not found: {label_column!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path} line {lineno}: ragged row with {len(row)} cells, expected {len(header)}")
            rows.append((lineno, row))

    keep = [(ln, r) for ln, r in rows if not any(_is_missing(c) for c in r)]
    dropped = len(rows) - len(keep)
    if dropped:
        logger.warning("dropped %d rows with missing cells from %s", dropped, path)
    if not keep:
        raise DataError(f"{path}: no complete data rows")

    label_idx = header.index(label_column)
    columns: dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        if j == label_idx:
            continue
        cells = [r[j].strip() for _, r in keep]
        parsed = [_parse_float(c) for c in cells]
        n_numeric = sum(v is not None for v in parsed)
        if n_numeric * 2 > len(cells):
            for (lineno, _), v, c in zip(keep, parsed, cells):
                if v is None:
                    raise DataError(f"{path} line {lineno}, column {name!r}: cannot parse {c!r} as a number")
            columns[name] = np.array(parsed, dtype=np.float64)
        else:
            columns[name] = np.array(cells, dtype=object)
    labels = np.array([r[label_idx].strip() for _, r in keep], dtype=object)
    return RawTable(columns, labels, label_column, dropped)


def preprocess(raw: RawTable, fit_index: np.ndarray | None = None) -> Dataset:
    """Clean, standardize and one-hot encode a raw table.

    Constant columns and exact duplicates of earlier columns are dropped.
    Standardization statistics come from all rows unless ``fit_index``
    restricts them to a subset (e.g. the training rows).
    """
    fit = np.arange(raw.n_rows) if fit_index is None else np.asarray(fit_index)

    blocks: list[np.ndarray] = []
    names: list[str] = []
    meta: list[str] = []
    seen: list[np.ndarray] = []
    for name, col in raw.columns.items():
        if len(np.unique(col)) < 2:
            logger.info("dropping constant column %s", name)
            continue
        if any(col.dtype == s.dtype and np.array_equal(col, s) for s in seen):
            logger.info("dropping duplicate column %s", name)
            continue
        seen.append(col)
        if raw.is_numeric(name):
            mu = col[fit].mean()
            sd = col[fit].std()
            if sd == 0.0:
                sd = 1.0
            blocks.append(((col - mu) / sd)[:, None])
            names.append(name)
            meta.append("continuous")
        else:
            cats = sorted(set(col.tolist()))
            onehot = (col[:, None] == np.array(cats, dtype=object)[None, :]).astype(np.float64)
            blocks.append(onehot)
            names.extend(f"{name}={c}" for c in cats)
            meta.extend([name] * len(cats))
    if not blocks:
        raise DataError("all feature columns are constant")

    X = np.hstack(blocks)
    class_names = sorted(set(raw.labels.tolist()), key=str)
    if len(class_names) < 2:
        raise DataError("single class after cleaning")
    lookup = {c: i for i, c in enumerate(class_names)}
    y = np.array([lookup[v] for v in raw.labels], dtype=np.int64)
    return Dataset(
        X=X,
        y=y,
        feature_lo=X.min(axis=0),
        feature_hi=X.max(axis=0),
        class_count=len(class_names),
        feature_meta=tuple(meta),
        feature_names=tuple(names),
        class_names=tuple(str(c) for c in class_names),
    )


def stratified_indices(y: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` indices with per-class counts proportional to ``y``.

    Largest-remainder allocation keeps every class within one sample of its
    exact share.
    """
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    quota = counts * size / len(y)
    alloc = np.floor(quota).astype(int)
    short = size - alloc.sum()
    if short:
        order = np.argsort(-(quota - alloc), kind="stable")
        alloc[order[:short]] += 1
    picked = [rng.choice(np.flatnonzero(y == c), a, replace=False) for c, a in zip(classes, alloc) if a]
    out = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    return np.sort(out)


def split_indices(y: np.ndarray, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if counts.min() < 2:
        bad = classes[counts.argmin()]
        raise DataError(f"class {bad} has fewer than 2 samples; cannot stratify")
    rng = np.random.default_rng(spec.seed)
    train = stratified_indices(y, int(round(spec.train_fraction * len(y))), rng)
    test = np.setdiff1d(np.arange(len(y)), train)
    return train, test


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Deterministic stratified train/test split; bounds are inherited."""
    train, test = split_indices(ds.y, spec)
    return ds.subset(train), ds.subset(test)


def synth_generate(
    n: int,
    d: int,
    C: int,
    imbalance: Sequence[float] | None = None,
    seed: int = 0,
    separation: float = 4.0,
    label_noise: float = 0.05,
    informative: int | None = None,
) -> Dataset:
    """Gaussian class clusters as a desk-scale stand-in for an intrusion corpus.

    Class means live on the first ``informative`` coordinates (default
    ``min(d, C)``) and every pair of means is at least ``separation`` unit
    standard deviations apart. ``label_noise`` of the rows get a uniformly
    drawn wrong label. Features are returned raw (not re-standardized) so
    the separation is preserved in the reported units.
    """
    if imbalance is None:
        imbalance = [1.0 / C] * C
    imb = np.asarray(imbalance, dtype=np.float64)
    if len(imb) != C:
        raise DataError("imbalance must have one entry per class")
    if np.any(imb <= 0):
        raise DataError("imbalance entries must be positive")
    if not math.isclose(imb.sum(), 1.0, abs_tol=1e-9):
        raise DataError("imbalance must sum to 1")
    if n < 10 * C:
        raise DataError("need at least 10 samples per class")

    rng = np.random.default_rng(seed)
    k = min(d, C) if informative is None else informative
    means = np.zeros((C, d))
    dirs = rng.normal(size=(C, k))
    means[:, :k] = dirs
    dist = np.linalg.norm(means[:, None] - means[None], axis=-1)
    mind = dist[np.triu_indices(C, 1)].min()
    means *= separation / mind

    counts = np.floor(imb * n).astype(int)
    counts[np.argsort(-(imb * n - counts), kind="stable")[: n - counts.sum()]] += 1
    y = np.repeat(np.arange(C), counts)
    X = means[y] + rng.normal(size=(n, d))
    flip = rng.random(n) < label_noise
    y = y.copy()
    y[flip] = (y[flip] + rng.integers(1, C, size=flip.sum())) % C
    perm = rng.permutation(n)
    X, y = X[perm], y[perm]
    return Dataset(
        X=X,
        y=y,
        feature_lo=X.min(axis=0),
        feature_hi=X.max(axis=0),
        class_count=C,
        feature_meta=("continuous",) * d,
    )


def save_dataset(ds: Dataset, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.schema.json`` and ``<stem>.csv``."""
    stem = Path(stem)
    schema = {
        "schema": SCHEMA_ID,
        "feature_names": list(ds.feature_names),
        "feature_meta": list(ds.feature_meta),
        "feature_lo": ds.feature_lo.tolist(),
        "feature_hi": ds.feature_hi.tolist(),
        "class_names": list(ds.class_names),
        "class_count": ds.class_count,
    }
    schema_path = stem.with_suffix(".schema.json")
    csv_path = stem.with_suffix(".csv")
    schema_path.write_text(json.dumps(schema, indent=1))
    table = np.column_stack([ds.sample_ids, ds.X, ds.y])
    fmt = ["%d"] + ["%.17g"] * ds.n_features + ["%d"]
    header = ",".join(["sample_id", *ds.feature_names, "label"])
    np.savetxt(csv_path, table, fmt=fmt, delimiter=",", header=header, comments="")
    return schema_path, csv_path


def load_dataset(stem: str | Path) -> Dataset:
    stem = Path(stem)
    schema = json.loads(stem.with_suffix(".schema.json").read_text())
    if schema.get("schema") != SCHEMA_ID:
        raise DataError(f"unknown dataset schema {schema.get('schema')!r}")
    table = np.loadtxt(stem.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
    return Dataset(
        X=table[:, 1:-1],
        y=table[:, -1].astype(np.int64),
        feature_lo=np.array(schema["feature_lo"]),
        feature_hi=np.array(schema["feature_hi"]),
        class_count=schema["class_count"],
        feature_meta=tuple(schema["feature_meta"]),
        feature_names=tuple(schema["feature_names"]),
        class_names=tuple(schema["class_names"]),
        sample_ids=table[:, 0].astype(np.int64),
    )
