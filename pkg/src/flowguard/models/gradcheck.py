"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .neural import BiLSTMNet, LinearUnit, LSTMNet, MLPNet, Network

STEP = 1e-5
# below this magnitude the error is absolute: central differences at STEP carry ~1e-11 roundoff
GRAD_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_params: int
    worst_param: str


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def check_network(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    seed: int = 0,
    max_checks: Optional[int] = None,
    step: float = STEP,
) -> GradCheckResult:
    """Compare ``net.loss_and_grad`` with central differences.

    A dropout mask, when the network has one, is drawn once and held fixed so
    the loss is a deterministic function of the parameters. With
    ``max_checks`` a seeded random subset of coordinates is probed.
    """
    rng = np.random.default_rng(seed)
    params = {k: np.ascontiguousarray(v) for k, v in net.init(rng).items()}
    mask = net.dropout_mask(rng, X.shape[0])
    _, grads = net.loss_and_grad(params, X, y, mask)
    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    if max_checks is not None and max_checks < len(coords):
        pick = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst, worst_name = 0.0, ""
    for name, i in coords:
        flat = params[name].reshape(-1)
        orig = flat[i]
        hi, lo = orig + step, orig - step
        flat[i] = hi
        lp, _ = net.loss_and_grad(params, X, y, mask)
        flat[i] = lo
        lm, _ = net.loss_and_grad(params, X, y, mask)
        flat[i] = orig
        # divide by the step actually taken after rounding, not the nominal one
        numeric = (lp - lm) / (hi - lo)
        err = relative_error(float(grads[name].reshape(-1)[i]), numeric)
        if err > worst:
            worst, worst_name = err, f"{name}[{i}]"
    n_params = sum(p.size for p in params.values())
    return GradCheckResult(worst, len(coords), n_params, worst_name)


def tiny_instance(n_rows: int, n_features: int, seed: int):
    rng = np.random.default_rng(seed + 1)
    X = rng.standard_normal((n_rows, n_features))
    y = (rng.random(n_rows) < 0.5).astype(np.float64)
    return X, y


def gradient_check(
    kind: str,
    *,
    n_features: int = 3,
    units: int = 2,
    layers: int = 1,
    seq_mode: str = "features",
    n_rows: int = 4,
    seed: int = 0,
    max_checks: Optional[int] = None,
    dropout: float = 0.2,
) -> GradCheckResult:
    """Gradient check on a small instance of one network kind.

    ``seq_mode="features"`` (one timestep per feature) is the default so the
    recurrent weights actually receive gradient.
    """
    X, y = tiny_instance(n_rows, n_features, seed)
    if kind == "linear":
        net: Network = LinearUnit(n_features)
        y = np.random.default_rng(seed + 2).standard_normal(n_rows)
    elif kind == "mlp":
        net = MLPNet(n_features, hidden=units)
    elif kind == "lstm":
        net = LSTMNet(n_features, units=units, layers=layers, dropout=dropout, seq_mode=seq_mode)
    elif kind == "bilstm":
        net = BiLSTMNet(n_features, units=units, seq_mode=seq_mode)
    else:
        raise ValueError(f"no gradient check for kind {kind!r}")
    return check_network(net, X, y, seed=seed, max_checks=max_checks)
