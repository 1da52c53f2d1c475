"""Confusion-matrix metrics, ROC curves and trapezoidal AUC."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f_score(self) -> float:
        # harmonic mean 2PR/(P+R); the factor 2 keeps F within [min(P,R), max(P,R)]
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def confusion(y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionMatrix:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    return ConfusionMatrix(
        tp=int(np.sum(y_true & y_pred)),
        tn=int(np.sum(~y_true & ~y_pred)),
        fp=int(np.sum(~y_true & y_pred)),
        fn=int(np.sum(y_true & ~y_pred)),
    )


def roc_curve(y_true: np.ndarray, scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), one point per distinct score plus the (0, 0) origin.

    A sample counts as positive at threshold t when its score is >= t.
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes in y_true")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last_of_run]]
    return fpr, tpr, thresholds


def auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    fpr = np.asarray(fpr, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f_score: float
    auc: float
    roc_points: List[Tuple[float, float]] = field(default_factory=list)
    thresholds: List[float] = field(default_factory=list)
    threshold: float = 0.5

    def to_dict(self) -> dict:
        c = self.confusion
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "auc": self.auc,
            "threshold": self.threshold,
            "n": c.total,
            "confusion": {"tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn},
        }

    def write_json(self, path: str | os.PathLike, **extra) -> None:
        with open(path, "w") as fh:
            json.dump({**extra, **self.to_dict()}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_roc_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr", "threshold"])
            for (x, y), t in zip(self.roc_points, self.thresholds):
                w.writerow([repr(x), repr(y), repr(t)])


def evaluate_scores(y_true: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty test set")
    if np.unique(y_true).size < 2:
        raise ValueError("test set must contain both classes (AUC is undefined otherwise)")
    cm = confusion(y_true, scores >= threshold)
    fpr, tpr, thr = roc_curve(y_true, scores)
    return MetricsReport(
        confusion=cm,
        accuracy=cm.accuracy,
        precision=cm.precision,
        recall=cm.recall,
        f_score=cm.f_score,
        auc=auc(fpr, tpr),
        roc_points=list(zip(fpr.tolist(), tpr.tolist())),
        thresholds=thr.tolist(),
        threshold=threshold,
    )
