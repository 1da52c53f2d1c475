from .base import (
    DEFAULT_HYPERPARAMS,
    FeatureMismatch,
    ModelError,
    ModelKind,
    TrainedModel,
    evaluate,
    predict_proba,
    train,
)
from .metrics import ConfusionMatrix, MetricsReport, auc, confusion, evaluate_scores, roc_curve
from .serialize import load_model, save_model

__all__ = [
    "DEFAULT_HYPERPARAMS", "FeatureMismatch", "ModelError", "ModelKind", "TrainedModel",
    "evaluate", "predict_proba", "train", "ConfusionMatrix", "MetricsReport", "auc",
    "confusion", "evaluate_scores", "roc_curve", "load_model", "save_model",
]
