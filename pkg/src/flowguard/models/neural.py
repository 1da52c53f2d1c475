"""Numpy networks with hand-written backpropagation: MLP, stacked LSTM and BiLSTM.

Every network maps a batch of standardized flow vectors to one logit per row
and exposes ``loss_and_grad`` for binary cross-entropy (mean over the batch).
LSTM gates follow the i, f, g, o layout with sigmoid recurrent activations and
unit forget-gate bias at initialisation. Recurrent models see each flow
either as one timestep of all features (``seq_mode="timestep"``) or as one
timestep per feature (``seq_mode="features"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

Params = Dict[str, np.ndarray]


class TrainingError(RuntimeError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to the logits."""
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    return float(loss), (sigmoid(z) - y) / z.shape[0]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    return np.ascontiguousarray(q if rows >= cols else q.T)


def to_sequence(X: np.ndarray, seq_mode: str) -> np.ndarray:
    if seq_mode == "timestep":
        return X[:, None, :]
    if seq_mode == "features":
        return X[:, :, None]
    raise ValueError(f"unknown seq_mode {seq_mode!r}")


# -- LSTM layer ----------------------------------------------------------------


def lstm_forward(X: np.ndarray, W: np.ndarray, U: np.ndarray, b: np.ndarray, reverse: bool = False):
    """Run one LSTM layer; returns hidden states in processing order and a cache.

    X is (batch, time, features). With ``reverse`` the sequence is consumed
    back to front, so ``H[:, -1]`` is the state after seeing timestep 0.
    """
    if reverse:
        X = X[:, ::-1]
    B, T, _ = X.shape
    Hn = U.shape[0]
    XW = X @ W + b
    h = np.zeros((B, Hn))
    c = np.zeros((B, Hn))
    Hs = np.empty((B, T, Hn))
    gates = np.empty((B, T, 4 * Hn))
    Cs = np.empty((B, T, Hn))
    tanh_c = np.empty((B, T, Hn))
    for t in range(T):
        z = XW[:, t] + h @ U
        i = sigmoid(z[:, :Hn])
        f = sigmoid(z[:, Hn : 2 * Hn])
        g = np.tanh(z[:, 2 * Hn : 3 * Hn])
        o = sigmoid(z[:, 3 * Hn :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[:, t, :Hn], gates[:, t, Hn : 2 * Hn] = i, f
        gates[:, t, 2 * Hn : 3 * Hn], gates[:, t, 3 * Hn :] = g, o
        Cs[:, t], tanh_c[:, t], Hs[:, t] = c, tc, h
    cache = (X, W, U, Hs, gates, Cs, tanh_c, reverse)
    return Hs, cache


def lstm_backward(dH: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """BPTT for :func:`lstm_forward`; ``dH`` is in processing order.

    Returns (dX in original time order, dW, dU, db).
    """
    X, W, U, Hs, gates, Cs, tanh_c, reverse = cache
    B, T, Hn = Hs.shape
    dZ = np.empty((B, T, 4 * Hn))
    dh_next = np.zeros((B, Hn))
    dc_next = np.zeros((B, Hn))
    for t in reversed(range(T)):
        i = gates[:, t, :Hn]
        f = gates[:, t, Hn : 2 * Hn]
        g = gates[:, t, 2 * Hn : 3 * Hn]
        o = gates[:, t, 3 * Hn :]
        tc = tanh_c[:, t]
        c_prev = Cs[:, t - 1] if t > 0 else 0.0
        dh = dH[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[:, t]
        dz[:, :Hn] = dc * g * i * (1.0 - i)
        dz[:, Hn : 2 * Hn] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * Hn : 3 * Hn] = dc * i * (1.0 - g * g)
        dz[:, 3 * Hn :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ U.T
    D = X.shape[2]
    flat_dz = dZ.reshape(B * T, 4 * Hn)
    dW = X.reshape(B * T, D).T @ flat_dz
    if T > 1:
        prev = Hs[:, :-1].reshape(B * (T - 1), Hn)
        dU = prev.T @ dZ[:, 1:].reshape(B * (T - 1), 4 * Hn)
    else:
        dU = np.zeros_like(U)
    db = flat_dz.sum(axis=0)
    dX = dZ @ W.T
    if reverse:
        dX = dX[:, ::-1]
    return dX, dW, dU, db


def _lstm_params(rng: np.random.Generator, n_in: int, units: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    W = glorot_uniform(rng, n_in, 4 * units)
    U = orthogonal(rng, units, 4 * units)
    b = np.zeros(4 * units)
    b[units : 2 * units] = 1.0
    return W, U, b


# -- networks --------------------------------------------------------------------


class Network:
    """Common interface; subclasses fill in ``init``, ``forward`` and ``backward``."""

    kind = ""
    has_dropout = False

    def init(self, rng: np.random.Generator) -> Params:
        raise NotImplementedError

    def forward(self, params: Params, X: np.ndarray, mask: Optional[np.ndarray] = None):
        raise NotImplementedError

    def backward(self, params: Params, cache, dz: np.ndarray) -> Params:
        raise NotImplementedError

    def penalty(self, params: Params, batch: int) -> Tuple[float, Params]:
        return 0.0, {}

    def dropout_mask(self, rng: np.random.Generator, batch: int) -> Optional[np.ndarray]:
        return None

    def logits(self, params: Params, X: np.ndarray) -> np.ndarray:
        return self.forward(params, X, None)[0]

    def loss_and_grad(
        self, params: Params, X: np.ndarray, y: np.ndarray, mask: Optional[np.ndarray] = None
    ) -> Tuple[float, Params]:
        z, cache = self.forward(params, X, mask)
        loss, dz = bce_with_logits(z, y)
        grads = self.backward(params, cache, dz)
        pen, dpen = self.penalty(params, X.shape[0])
        for k, v in dpen.items():
            grads[k] = grads[k] + v
        return loss + pen, grads

    def config(self) -> dict:
        raise NotImplementedError


class MLPNet(Network):
    """One ReLU hidden layer with an L2 penalty ``alpha / (2 * batch) * ||W||^2``."""

    kind = "mlp"

    def __init__(self, n_in: int, hidden: int = 100, alpha: float = 1e-4) -> None:
        self.n_in, self.hidden, self.alpha = n_in, hidden, alpha

    def init(self, rng: np.random.Generator) -> Params:
        return {
            "hidden/W": glorot_uniform(rng, self.n_in, self.hidden),
            "hidden/b": glorot_uniform(rng, self.n_in, self.hidden, (self.hidden,)),
            "out/W": glorot_uniform(rng, self.hidden, 1),
            "out/b": glorot_uniform(rng, self.hidden, 1, (1,)),
        }

    def forward(self, params, X, mask=None):
        a = X @ params["hidden/W"] + params["hidden/b"]
        h = np.maximum(a, 0.0)
        z = (h @ params["out/W"])[:, 0] + params["out/b"][0]
        return z, (X, a, h)

    def backward(self, params, cache, dz):
        X, a, h = cache
        dz2 = dz[:, None]
        g = {"out/W": h.T @ dz2, "out/b": dz2.sum(axis=0)}
        da = (dz2 @ params["out/W"].T) * (a > 0)
        g["hidden/W"] = X.T @ da
        g["hidden/b"] = da.sum(axis=0)
        return g

    def penalty(self, params, batch):
        if not self.alpha:
            return 0.0, {}
        scale = self.alpha / batch
        W1, W2 = params["hidden/W"], params["out/W"]
        loss = 0.5 * scale * (np.sum(W1 * W1) + np.sum(W2 * W2))
        return float(loss), {"hidden/W": scale * W1, "out/W": scale * W2}

    def config(self) -> dict:
        return {"n_in": self.n_in, "hidden": self.hidden, "alpha": self.alpha}


class LSTMNet(Network):
    """Stacked LSTM layers, inverted dropout on the last state, one sigmoid output."""

    kind = "lstm"
    has_dropout = True

    def __init__(self, n_in: int, units: int = 50, layers: int = 3, dropout: float = 0.2, seq_mode: str = "timestep") -> None:
        self.n_in, self.units, self.layers, self.dropout, self.seq_mode = n_in, units, layers, dropout, seq_mode
        self.step_dim = n_in if seq_mode == "timestep" else 1

    def init(self, rng):
        p: Params = {}
        d = self.step_dim
        for k in range(self.layers):
            p[f"lstm{k}/W"], p[f"lstm{k}/U"], p[f"lstm{k}/b"] = _lstm_params(rng, d, self.units)
            d = self.units
        p["out/W"] = glorot_uniform(rng, self.units, 1)
        p["out/b"] = np.zeros(1)
        return p

    def dropout_mask(self, rng, batch):
        if not self.dropout:
            return None
        keep = 1.0 - self.dropout
        return (rng.random((batch, self.units)) < keep) / keep

    def forward(self, params, X, mask=None):
        H = to_sequence(X, self.seq_mode)
        caches = []
        for k in range(self.layers):
            H, c = lstm_forward(H, params[f"lstm{k}/W"], params[f"lstm{k}/U"], params[f"lstm{k}/b"])
            caches.append(c)
        last = H[:, -1]
        dropped = last * mask if mask is not None else last
        z = (dropped @ params["out/W"])[:, 0] + params["out/b"][0]
        return z, (caches, dropped, mask, H.shape)

    def backward(self, params, cache, dz):
        caches, dropped, mask, shape = cache
        dz2 = dz[:, None]
        g = {"out/W": dropped.T @ dz2, "out/b": dz2.sum(axis=0)}
        dlast = dz2 @ params["out/W"].T
        if mask is not None:
            dlast = dlast * mask
        dH = np.zeros(shape)
        dH[:, -1] = dlast
        for k in reversed(range(self.layers)):
            dX, dW, dU, db = lstm_backward(dH, caches[k])
            g[f"lstm{k}/W"], g[f"lstm{k}/U"], g[f"lstm{k}/b"] = dW, dU, db
            dH = dX
        return g

    def config(self):
        return {"n_in": self.n_in, "units": self.units, "layers": self.layers, "dropout": self.dropout, "seq_mode": self.seq_mode}


class BiLSTMNet(Network):
    """One bidirectional LSTM layer; final forward and backward states are concatenated."""

    kind = "bilstm"

    def __init__(self, n_in: int, units: int = 64, seq_mode: str = "timestep") -> None:
        self.n_in, self.units, self.seq_mode = n_in, units, seq_mode
        self.step_dim = n_in if seq_mode == "timestep" else 1

    def init(self, rng):
        p: Params = {}
        for d in ("fwd", "bwd"):
            p[f"{d}/W"], p[f"{d}/U"], p[f"{d}/b"] = _lstm_params(rng, self.step_dim, self.units)
        p["out/W"] = glorot_uniform(rng, 2 * self.units, 1)
        p["out/b"] = np.zeros(1)
        return p

    def forward(self, params, X, mask=None):
        S = to_sequence(X, self.seq_mode)
        Hf, cf = lstm_forward(S, params["fwd/W"], params["fwd/U"], params["fwd/b"])
        Hb, cb = lstm_forward(S, params["bwd/W"], params["bwd/U"], params["bwd/b"], reverse=True)
        both = np.concatenate([Hf[:, -1], Hb[:, -1]], axis=1)
        z = (both @ params["out/W"])[:, 0] + params["out/b"][0]
        return z, (cf, cb, both, Hf.shape)

    def backward(self, params, cache, dz):
        cf, cb, both, shape = cache
        dz2 = dz[:, None]
        g = {"out/W": both.T @ dz2, "out/b": dz2.sum(axis=0)}
        dboth = dz2 @ params["out/W"].T
        n = self.units
        for d, c, dh in (("fwd", cf, dboth[:, :n]), ("bwd", cb, dboth[:, n:])):
            dH = np.zeros(shape)
            dH[:, -1] = dh
            _, g[f"{d}/W"], g[f"{d}/U"], g[f"{d}/b"] = lstm_backward(dH, c)
        return g

    def config(self):
        return {"n_in": self.n_in, "units": self.units, "seq_mode": self.seq_mode}


class LinearUnit(Network):
    """Single linear-activation unit with loss ``sum(y * z)``.

    The loss is linear in every parameter, so its gradient ``(X^T y, sum(y))``
    is known in closed form and central differences are exact up to rounding.
    """

    kind = "linear"

    def __init__(self, n_in: int) -> None:
        self.n_in = n_in

    def init(self, rng):
        return {"W": rng.standard_normal((self.n_in, 1)), "b": rng.standard_normal(1)}

    def forward(self, params, X, mask=None):
        return (X @ params["W"])[:, 0] + params["b"][0], X

    def loss_and_grad(self, params, X, y, mask=None):
        z, _ = self.forward(params, X)
        return float(y @ z), {"W": X.T @ y[:, None], "b": np.array([y.sum()])}

    def config(self):
        return {"n_in": self.n_in}


NETWORKS = {"mlp": MLPNet, "lstm": LSTMNet, "bilstm": BiLSTMNet, "linear": LinearUnit}


def build_network(kind: str, config: dict) -> Network:
    return NETWORKS[kind](**config)


# -- optimisation ------------------------------------------------------------------


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class FitResult:
    params: Params
    history: List[float] = field(default_factory=list)
    stopped_early: bool = False


def fit(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    *,
    epochs: int,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
    tol: Optional[float] = None,
    patience: int = 10,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> FitResult:
    """Minibatch Adam on mean BCE.

    With ``tol`` set, training stops once the epoch loss has failed to improve
    on the best seen by at least ``tol`` for ``patience`` consecutive epochs.
    """
    rng = np.random.default_rng(seed)
    params = net.init(rng)
    opt = Adam(params, lr)
    y = y.astype(np.float64)
    n = X.shape[0]
    result = FitResult(params)
    best, stale = math.inf, 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            mask = net.dropout_mask(rng, idx.size)
            loss, grads = net.loss_and_grad(params, X[idx], y[idx], mask)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch + 1}")
            opt.step(params, grads)
            total += loss * idx.size
        epoch_loss = total / n
        result.history.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_loss)
        if tol is not None:
            if epoch_loss > best - tol:
                stale += 1
            else:
                stale = 0
            best = min(best, epoch_loss)
            if stale >= patience:
                result.stopped_early = True
                break
    return result


def smoothed_loss_violations(history: List[float], window: int = 10) -> List[int]:
    """Epoch indices (1-based, window end) where the moving-average loss rose."""
    if len(history) < window + 1:
        return []
    h = np.asarray(history)
    ma = np.convolve(h, np.ones(window) / window, mode="valid")
    return [int(i) + window + 1 for i in np.flatnonzero(np.diff(ma) > 0)]
