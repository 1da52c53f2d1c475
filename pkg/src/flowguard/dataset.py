"""Labelled feature matrices: CSV I/O, stratified splitting, scaling and ANOVA-F ranking."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .flowmeter import FEATURE_NAMES, ID_COLUMNS, LABEL_COLUMN, FlowFeatures


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    feature_names: Tuple[str, ...]
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise DatasetError("X must be two-dimensional")
        if X.shape[0] != y.shape[0]:
            raise DatasetError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if X.shape[1] != len(self.feature_names):
            raise DatasetError(f"X has {X.shape[1]} columns for {len(self.feature_names)} names")
        if y.size and not np.isin(y, (0, 1)).all():
            raise DatasetError("labels must be 0 or 1")
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.feature_names, self.X[idx], self.y[idx])

    def columns(self, names: Sequence[str]) -> "Dataset":
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise DatasetError(f"unknown feature columns: {missing}")
        idx = [self.feature_names.index(n) for n in names]
        return Dataset(tuple(names), self.X[:, idx], self.y)

    def class_counts(self) -> Tuple[int, int]:
        return int((self.y == 0).sum()), int((self.y == 1).sum())


def from_flows(flows: Iterable[FlowFeatures]) -> Dataset:
    rows, labels = [], []
    for f in flows:
        if f.label is None:
            raise DatasetError(f"flow {f.five_tuple} has no label")
        rows.append(f.values)
        labels.append(f.label)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))
    return Dataset(FEATURE_NAMES, X, np.array(labels, dtype=np.int64))


def load_csv(path: str | os.PathLike, missing: str = "reject") -> Dataset:
    """Load a CSV with a header row and a ``Label`` column.

    Flow identifier columns are ignored. Non-finite or empty cells are
    rejected (the error names every offending cell, up to ten) unless
    ``missing="impute"``, which fills them with the column median.
    """
    if missing not in ("reject", "impute"):
        raise DatasetError(f"unknown missing-value policy {missing!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if LABEL_COLUMN not in header:
            raise DatasetError(f"{path}: no {LABEL_COLUMN!r} column")
        label_at = header.index(LABEL_COLUMN)
        feat_at = [i for i, h in enumerate(header) if i != label_at and h not in ID_COLUMNS]
        names = tuple(header[i] for i in feat_at)
        rows, labels, bad = [], [], []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for i in feat_at:
                try:
                    v = float(row[i])
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    bad.append((line, header[i], row[i]))
                vals.append(v)
            try:
                labels.append(int(row[label_at]))
            except ValueError:
                raise DatasetError(f"{path}:{line}: label {row[label_at]!r} is not 0/1") from None
            rows.append(vals)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    if bad:
        if missing == "reject":
            shown = "; ".join(f"line {ln} column {c!r} = {v!r}" for ln, c, v in bad[:10])
            raise DatasetError(f"{path}: {len(bad)} missing/non-finite values: {shown}")
        for j in range(X.shape[1]):
            col = X[:, j]
            ok = np.isfinite(col)
            if not ok.all():
                col[~ok] = np.median(col[ok]) if ok.any() else 0.0
    return Dataset(names, X, np.array(labels, dtype=np.int64))


def save_csv(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.feature_names, LABEL_COLUMN])
        for row, lab in zip(ds.X.tolist(), ds.y.tolist()):
            w.writerow([repr(v) for v in row] + [lab])


def train_test_split(ds: Dataset, test_fraction: float = 0.3, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Stratified, seeded split.

    The test size is ``round(test_fraction * n)``; it is shared between the
    two classes by largest remainder, so each split's class counts are within
    one sample of the global ratio.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(ds)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    counts = ds.class_counts()
    if min(counts) < 2:
        raise DatasetError(f"each class needs at least 2 samples, got {counts}")
    n_test = min(n - 2, max(2, int(round(test_fraction * n))))
    ideal = [c * n_test / n for c in counts]
    alloc = [int(math.floor(v)) for v in ideal]
    order = sorted(range(2), key=lambda c: (-(ideal[c] - alloc[c]), c))
    for c in order[: n_test - sum(alloc)]:
        alloc[c] += 1
    for c in range(2):  # keep one of each class on both sides
        alloc[c] = min(max(alloc[c], 1), counts[c] - 1)

    rng = np.random.default_rng(seed)
    test_idx, train_idx = [], []
    for c in range(2):
        idx = np.flatnonzero(ds.y == c)
        idx = idx[rng.permutation(idx.size)]
        test_idx.append(idx[: alloc[c]])
        train_idx.append(idx[alloc[c] :])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


class Standardizer:
    """Z-scoring with statistics from the training split; constant columns map to 0."""

    def __init__(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), X.std(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        Z = (X - self.mean) / safe
        Z[:, self.std == 0] = 0.0
        return Z

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Standardizer)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )


def anova_f(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Two-group one-way ANOVA F per column (between df 1, within df n - 2).

    Constant columns score 0; columns with zero within-group spread score +inf.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    n = X.shape[0]
    groups = [X[y == c] for c in (0, 1)]
    if any(g.shape[0] < 2 for g in groups):
        raise DatasetError("ANOVA F needs at least two samples of each class")
    grand = X.mean(axis=0)
    ss_between = np.zeros(X.shape[1])
    ss_within = np.zeros(X.shape[1])
    for g in groups:
        m = g.mean(axis=0)
        ss_between += g.shape[0] * (m - grand) ** 2
        ss_within += ((g - m) ** 2).sum(axis=0)
    ms_between = ss_between / 1.0
    ms_within = ss_within / (n - 2)
    # spread below float noise of the column magnitude counts as none
    scale = np.maximum(np.abs(X).max(axis=0), 1e-300)
    tiny = 1e-24 * scale**2
    F = np.zeros(X.shape[1])
    sep = ms_within > tiny
    F[sep] = ms_between[sep] / ms_within[sep]
    F[~sep & (ms_between > tiny)] = math.inf
    return F


def f_score_rank(ds: Dataset) -> List[Tuple[str, float]]:
    """Features sorted by descending F; ties keep their original column order."""
    if len(ds.feature_names) == 0:
        raise DatasetError("dataset has no features")
    if min(ds.class_counts()) == 0:
        raise DatasetError("ranking needs both classes present")
    F = anova_f(ds.X, ds.y)
    order = sorted(range(F.size), key=lambda j: (-F[j], j))
    return [(ds.feature_names[j], float(F[j])) for j in order]


def select_k_best(ds: Dataset, k: int, ranking: Sequence[Tuple[str, float]] | None = None) -> Dataset:
    """Keep the ``k`` top-ranked columns in their original order.

    ``ranking`` lets a ranking fitted on one split be applied to another.
    """
    if not 1 <= k <= len(ds.feature_names):
        raise DatasetError(f"k must be in 1..{len(ds.feature_names)}, got {k}")
    ranking = f_score_rank(ds) if ranking is None else ranking
    keep = {name for name, _ in ranking[:k]}
    return ds.columns([n for n in ds.feature_names if n in keep])


def shifted_gaussian_set(
    n_per_class: int = 500,
    n_informative: int = 20,
    n_noise: int = 10,
    seed: int = 0,
    min_shift: float = 0.3,
    max_shift: float = 1.0,
) -> Tuple[Dataset, List[str]]:
    """Unit-variance Gaussian columns; informative ones shift class 1's mean.

    Shifts are spread evenly over [min_shift, max_shift] standard deviations
    and columns are placed in a seeded random order. Returns the dataset and
    the informative column names.
    """
    rng = np.random.default_rng(seed)
    d = n_informative + n_noise
    y = np.repeat([0, 1], n_per_class)
    X = rng.standard_normal((y.size, d))
    shifts = np.r_[np.linspace(min_shift, max_shift, n_informative), np.zeros(n_noise)]
    X += y[:, None] * shifts[None, :]
    perm = rng.permutation(d)
    names = [f"inf_{j:02d}" if j < n_informative else f"noise_{j - n_informative:02d}" for j in range(d)]
    ordered = [names[j] for j in perm]
    return Dataset(tuple(ordered), X[:, perm], y), [n for n in ordered if n.startswith("inf_")]
