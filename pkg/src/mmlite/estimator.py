"""scikit-learn style wrappers around model building, training and distillation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import resolve_config
from .data import Dataset
from .distill import DEFAULT_ALPHA, DEFAULT_TEMPERATURE, predict_logits, train
from .errors import ContractError
from .model import build_model


def _images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim != 4:
        raise ContractError(f"expected images [N, C, H, W], got shape {X.shape}")
    return X


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LiteClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier over NCHW arrays.

    ``config`` names a preset or config file; its class count and input
    resolution are overridden from the training data.
    """

    def __init__(self, config="lite-st-tiny", epochs=10, lr=0.05, batch_size=32, weight_decay=1e-4, seed=0):
        self.config = config
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def _prepare(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        if X.ndim != 4:
            raise ContractError(f"expected images [N, C, H, W], got shape {X.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        cfg = resolve_config(self.config).replace(num_classes=len(self.classes_),
                                                  input_resolution=X.shape[2:], in_channels=X.shape[1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return X, codes, cfg

    def _fit(self, X, y, teacher_logits=None, alpha=1.0, T=DEFAULT_TEMPERATURE):
        X, codes, cfg = self._prepare(X, y)
        self.model_ = build_model(cfg, seed=self.seed)
        ds = Dataset(X, codes, len(self.classes_), len(codes))
        self.report_ = train(self.model_, ds, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                             seed=self.seed, weight_decay=self.weight_decay, teacher_logits=teacher_logits,
                             alpha=alpha, T=T)
        return self

    def fit(self, X, y):
        return self._fit(X, y)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _images(X)
        if X.shape[1:] != (self.model_.config.in_channels, *self.model_.config.input_resolution):
            raise ContractError(f"input shape {X.shape[1:]} differs from the fitted shape")
        return predict_logits(self.model_, X).astype(np.float64)

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class DistilledClassifier(LiteClassifier):
    """Student trained against a teacher :class:`LiteClassifier`.

    An unfitted teacher is fitted on the same data first. ``alpha=1``
    reduces to plain supervised training.
    """

    def __init__(self, teacher=None, config="lite-st-tiny", alpha=DEFAULT_ALPHA, temperature=DEFAULT_TEMPERATURE,
                 epochs=10, lr=0.05, batch_size=32, weight_decay=1e-4, seed=0):
        super().__init__(config=config, epochs=epochs, lr=lr, batch_size=batch_size,
                         weight_decay=weight_decay, seed=seed)
        self.teacher = teacher
        self.alpha = alpha
        self.temperature = temperature

    def fit(self, X, y):
        teacher = self.teacher if self.teacher is not None else LiteClassifier("lite-tr-tiny", seed=self.seed)
        try:
            check_is_fitted(teacher, "model_")
            self.teacher_ = teacher
        except Exception:
            self.teacher_ = teacher.fit(X, y)
        X_ = _images(X)
        if not np.array_equal(self.teacher_.classes_, np.unique(y)):
            raise ContractError("teacher and student training labels differ")
        logits = self.teacher_.decision_function(X_) if self.alpha < 1.0 else None
        return self._fit(X, y, teacher_logits=logits, alpha=self.alpha, T=self.temperature)


__all__ = ["DistilledClassifier", "LiteClassifier"]
