"""Gini decision trees (exhaustive CART splits) and extremely randomized trees."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np


@dataclass
class Tree:
    """Flat node arrays; a node is a leaf when ``feature == -1``.

    Samples go left when ``x[feature] <= threshold``. ``value`` is the
    fraction of class-1 training samples that reached the node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            f = np.where(internal, feat, 0)
            go_left = X[rows, f] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return self.value[node]

    def depth(self) -> int:
        def d(i: int) -> int:
            if self.feature[i] < 0:
                return 0
            return 1 + max(d(int(self.left[i])), d(int(self.right[i])))

        return d(0)


def gini(n_pos: np.ndarray | float, n: np.ndarray | float) -> np.ndarray | float:
    p = n_pos / n
    return 2.0 * p * (1.0 - p)


def best_gini_split(X: np.ndarray, y: np.ndarray) -> Optional[Tuple[int, float, float]]:
    """Exhaustive search for the split minimising weighted child Gini.

    Returns (feature, threshold, weighted impurity) or None when every column
    is constant. Ties go to the lowest feature index, then the lowest threshold.
    """
    n, d = X.shape
    best: Optional[Tuple[int, float, float]] = None
    total_pos = float(y.sum())
    for j in range(d):
        order = np.argsort(X[:, j], kind="mergesort")
        xs = X[order, j]
        valid = np.flatnonzero(xs[1:] > xs[:-1])
        if valid.size == 0:
            continue
        cpos = np.cumsum(y[order])[valid].astype(np.float64)
        nl = (valid + 1).astype(np.float64)
        nr = n - nl
        imp = (nl * gini(cpos, nl) + nr * gini(total_pos - cpos, nr)) / n
        k = int(np.argmin(imp))
        if best is None or imp[k] < best[2]:
            a, b = xs[valid[k]], xs[valid[k] + 1]
            thr = a / 2.0 + b / 2.0
            if not a <= thr < b:
                thr = a
            best = (j, float(thr), float(imp[k]))
    return best


def _random_split(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_features: int):
    """Pick the best of uniform-random thresholds on up to ``max_features`` random non-constant columns."""
    n, d = X.shape
    lo, hi = X.min(axis=0), X.max(axis=0)
    best = None
    tried = 0
    total_pos = float(y.sum())
    for j in rng.permutation(d):
        if tried >= max_features:
            break
        if not hi[j] > lo[j]:
            continue
        tried += 1
        thr = float(rng.uniform(lo[j], hi[j]))
        if thr >= hi[j]:
            thr = float(lo[j])
        left = X[:, j] <= thr
        nl = float(left.sum())
        nr = n - nl
        pl = float(y[left].sum())
        imp = (nl * gini(pl, nl) + nr * gini(total_pos - pl, nr)) / n
        if best is None or imp < best[2]:
            best = (int(j), thr, imp)
    return best


def grow_tree(
    X: np.ndarray,
    y: np.ndarray,
    max_depth: int = 3,
    min_samples_split: int = 2,
    rng: Optional[np.random.Generator] = None,
    max_features: Optional[int] = None,
) -> Tree:
    """Greedy depth-first growth. With ``rng`` the splits are extra-trees random splits."""
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    value: List[float] = []
    count: List[int] = []

    def node(idx: np.ndarray, depth: int) -> int:
        i = len(feature)
        yi = y[idx]
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(yi.mean()))
        count.append(int(idx.size))
        pure = yi.min() == yi.max()
        if depth >= max_depth or idx.size < min_samples_split or pure:
            return i
        Xi = X[idx]
        if rng is None:
            split = best_gini_split(Xi, yi)
        else:
            split = _random_split(Xi, yi, rng, max_features or X.shape[1])
        if split is None:
            return i
        j, thr, _ = split
        go_left = Xi[:, j] <= thr
        if go_left.all() or not go_left.any():
            return i
        feature[i], threshold[i] = j, thr
        left[i] = node(idx[go_left], depth + 1)
        right[i] = node(idx[~go_left], depth + 1)
        return i

    node(np.arange(X.shape[0]), 0)
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
        np.array(count, dtype=np.int64),
    )


def grow_extra_trees(
    X: np.ndarray, y: np.ndarray, n_trees: int = 100, max_depth: int = 3, seed: int = 0
) -> List[Tree]:
    rng = np.random.default_rng(seed)
    max_features = max(1, int(math.sqrt(X.shape[1])))
    return [grow_tree(X, y, max_depth=max_depth, rng=rng, max_features=max_features) for _ in range(n_trees)]


def pack_trees(trees: List[Tree]) -> dict:
    """Concatenate node arrays, with child indices kept local to each tree."""
    offsets = np.cumsum([0] + [t.n_nodes for t in trees]).astype(np.int64)
    cat = lambda name: np.concatenate([getattr(t, name) for t in trees])
    return {
        "tree_offsets": offsets,
        "feature": cat("feature"),
        "threshold": cat("threshold"),
        "left": cat("left"),
        "right": cat("right"),
        "value": cat("value"),
        "n_samples": cat("n_samples"),
    }


def unpack_trees(arrays: dict) -> List[Tree]:
    off = arrays["tree_offsets"]
    return [
        Tree(*(arrays[k][a:b] for k in ("feature", "threshold", "left", "right", "value", "n_samples")))
        for a, b in zip(off[:-1].tolist(), off[1:].tolist())
    ]
