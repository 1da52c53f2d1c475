"""Common train / predict / evaluate interface over the seven classifier kinds."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..dataset import Dataset, Standardizer
from . import neural, trees
from .metrics import MetricsReport, evaluate_scores


class ModelKind(str, enum.Enum):
    GNB = "gnb"
    LR = "lr"
    DTREE = "dtree"
    EXTRA_TREES = "etrees"
    MLP = "mlp"
    LSTM = "lstm"
    BILSTM = "bilstm"


NEURAL_KINDS = (ModelKind.MLP, ModelKind.LSTM, ModelKind.BILSTM)

DEFAULT_HYPERPARAMS: Dict[ModelKind, dict] = {
    ModelKind.GNB: {"var_floor": 1e-9},
    ModelKind.LR: {"C": 1.0, "max_iter": 1000, "tol": 1e-6},
    ModelKind.DTREE: {"max_depth": 3},
    ModelKind.EXTRA_TREES: {"n_trees": 100, "max_depth": 3},
    ModelKind.MLP: {"hidden": 100, "alpha": 1e-4, "epochs": 300, "batch_size": 256, "lr": 1e-3, "tol": 1e-4, "patience": 10},
    ModelKind.LSTM: {"units": 50, "layers": 3, "dropout": 0.2, "epochs": 50, "batch_size": 256, "lr": 1e-3, "seq_mode": "timestep"},
    ModelKind.BILSTM: {"units": 64, "epochs": 50, "batch_size": 256, "lr": 1e-3, "seq_mode": "timestep"},
}


class ModelError(ValueError):
    pass


class FeatureMismatch(ModelError):
    pass


@dataclass
class TrainedModel:
    kind: ModelKind
    feature_names: Tuple[str, ...]
    standardizer: Standardizer
    params: Dict[str, np.ndarray]
    hyperparams: dict
    meta: dict = field(default_factory=dict)
    # wall-clock time is kept off the serialized form so model files stay byte-reproducible
    train_seconds: float = 0.0

    def predict_proba(self, X, feature_names: Optional[Sequence[str]] = None) -> np.ndarray:
        return predict_proba(self, X, feature_names)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int64)

    def save(self, path) -> int:
        from .serialize import save_model

        return save_model(self, path)

    @staticmethod
    def load(path) -> "TrainedModel":
        from .serialize import load_model

        return load_model(path)


def _check_binary(ds: Dataset) -> None:
    if len(ds) == 0 or min(ds.class_counts()) == 0:
        raise ModelError(f"training data must contain both classes, got counts {ds.class_counts()}")


def _network(kind: ModelKind, n_in: int, hp: dict) -> neural.Network:
    if kind is ModelKind.MLP:
        return neural.MLPNet(n_in, hp["hidden"], hp["alpha"])
    if kind is ModelKind.LSTM:
        return neural.LSTMNet(n_in, hp["units"], hp["layers"], hp["dropout"], hp["seq_mode"])
    return neural.BiLSTMNet(n_in, hp["units"], hp["seq_mode"])


def _fit_gnb(Z: np.ndarray, y: np.ndarray, hp: dict) -> Dict[str, np.ndarray]:
    prior = np.array([np.mean(y == 0), np.mean(y == 1)])
    mean = np.stack([Z[y == c].mean(axis=0) for c in (0, 1)])
    var = np.stack([Z[y == c].var(axis=0) for c in (0, 1)])
    return {"prior": prior, "mean": mean, "var": np.maximum(var, hp["var_floor"])}


def _fit_lr(Z: np.ndarray, y: np.ndarray, hp: dict) -> Tuple[Dict[str, np.ndarray], dict]:
    """Gradient descent on mean log-loss + ||w||^2 / (2 C n); the intercept is not penalized."""
    n, d = Z.shape
    lam = 1.0 / hp["C"]
    A = np.hstack([Z, np.ones((n, 1))])
    lipschitz = 0.25 * float(np.linalg.eigvalsh(A.T @ A / n)[-1]) + lam / n
    step = 1.0 / lipschitz
    w = np.zeros(d)
    b = 0.0
    yf = y.astype(np.float64)
    it = 0
    gnorm = float("nan")
    for it in range(hp["max_iter"]):
        r = neural.sigmoid(Z @ w + b) - yf
        gw = Z.T @ r / n + lam / n * w
        gb = float(r.mean())
        gnorm = float(np.sqrt(gw @ gw + gb * gb))
        if gnorm < hp["tol"]:
            break
        w -= step * gw
        b -= step * gb
    else:
        it = hp["max_iter"]
    return {"w": w, "b": np.array([b])}, {"iterations": it, "grad_norm": gnorm}


def train(
    kind: ModelKind | str,
    data: Dataset,
    hyperparams: Optional[dict] = None,
    seed: int = 0,
    on_epoch=None,
) -> TrainedModel:
    """Fit one classifier; the standardizer is fitted here, on ``data`` only."""
    kind = ModelKind(kind)
    _check_binary(data)
    hp = {**DEFAULT_HYPERPARAMS[kind], **(hyperparams or {})}
    unknown = set(hp) - set(DEFAULT_HYPERPARAMS[kind])
    if unknown:
        raise ModelError(f"unknown hyperparameters for {kind.value}: {sorted(unknown)}")
    started = time.perf_counter()
    scaler = Standardizer.fit(data.X)
    Z = scaler.transform(data.X)
    y = data.y
    meta: dict = {"n_train": int(len(data)), "seed": seed}

    if kind is ModelKind.GNB:
        params = _fit_gnb(Z, y, hp)
    elif kind is ModelKind.LR:
        params, info = _fit_lr(Z, y, hp)
        meta.update(info)
    elif kind is ModelKind.DTREE:
        params = trees.pack_trees([trees.grow_tree(Z, y, max_depth=hp["max_depth"])])
    elif kind is ModelKind.EXTRA_TREES:
        params = trees.pack_trees(trees.grow_extra_trees(Z, y, hp["n_trees"], hp["max_depth"], seed))
    else:
        net = _network(kind, Z.shape[1], hp)
        res = neural.fit(
            net,
            Z,
            y,
            epochs=hp["epochs"],
            batch_size=hp["batch_size"],
            lr=hp["lr"],
            seed=seed,
            tol=hp.get("tol"),
            patience=hp.get("patience", 10),
            on_epoch=on_epoch,
        )
        params = res.params
        meta.update(
            epochs=len(res.history),
            final_loss=res.history[-1],
            stopped_early=res.stopped_early,
            loss_history=res.history,
            smoothed_loss_violations=neural.smoothed_loss_violations(res.history),
        )
    model = TrainedModel(kind, data.feature_names, scaler, params, hp, meta)
    model.train_seconds = time.perf_counter() - started
    return model


def _as_matrix(model: TrainedModel, X, feature_names: Optional[Sequence[str]]) -> np.ndarray:
    if isinstance(X, Dataset):
        feature_names, X = X.feature_names, X.X
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if feature_names is not None and tuple(feature_names) != model.feature_names:
        missing = [n for n in model.feature_names if n not in feature_names]
        extra = [n for n in feature_names if n not in model.feature_names]
        raise FeatureMismatch(
            f"features do not match the model: missing {missing}, unexpected {extra}, "
            f"model expects {list(model.feature_names)}"
        )
    if X.shape[1] != len(model.feature_names):
        raise FeatureMismatch(f"model expects {len(model.feature_names)} features, got {X.shape[1]}")
    return X


def network_for(model: TrainedModel) -> neural.Network:
    return _network(model.kind, len(model.feature_names), model.hyperparams)


def predict_proba(model: TrainedModel, X, feature_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """P(label = 1) per row. ``X`` may be a matrix or a :class:`Dataset`."""
    X = _as_matrix(model, X, feature_names)
    Z = model.standardizer.transform(X)
    p = model.params
    kind = model.kind
    if kind is ModelKind.GNB:
        var, mean = p["var"], p["mean"]
        joint = np.log(p["prior"])[None, :] - 0.5 * np.stack(
            [np.sum(np.log(2 * np.pi * var[c]) + (Z - mean[c]) ** 2 / var[c], axis=1) for c in (0, 1)],
            axis=1,
        )
        return neural.sigmoid(joint[:, 1] - joint[:, 0])
    if kind is ModelKind.LR:
        return neural.sigmoid(Z @ p["w"] + p["b"][0])
    if kind in (ModelKind.DTREE, ModelKind.EXTRA_TREES):
        forest = trees.unpack_trees(p)
        return np.mean([t.predict_proba(Z) for t in forest], axis=0)
    net = network_for(model)
    return neural.sigmoid(net.logits(p, Z))


def evaluate(model: TrainedModel, test: Dataset, threshold: float = 0.5) -> MetricsReport:
    return evaluate_scores(test.y, predict_proba(model, test), threshold)
