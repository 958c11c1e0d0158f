"""scikit-learn compatible wrappers.

``SCFSPretrainer`` is a transformer: ``fit`` pre-trains on unlabeled images,
``transform`` returns frozen, L2-normalized features. ``KNNClassifier`` and
``LinearProbeClassifier`` score such features, so the usual
``Pipeline([("scfs", SCFSPretrainer()), ("knn", KNNClassifier())])`` works.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import TrainConfig
from .evaluation import extract_features, knn_predict, train_linear
from .trainer import TrainState, fit


def check_images(X) -> np.ndarray:
    """Validate a stack of RGB images and return float32 values in [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=None, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, H, W, 3), got {X.shape}")
    if X.dtype == np.uint8:
        return X.astype(np.float32) / 255.0
    X = X.astype(np.float32)
    if X.min() < 0 or X.max() > 1:
        raise ValueError("float images must have values in [0, 1]")
    return X


class SCFSPretrainer(TransformerMixin, BaseEstimator):
    """Self-supervised pre-training with multi-layer feature search.

    Parameters mirror :class:`~scfs.config.TrainConfig`; anything not exposed
    here can be passed through ``config``.
    """

    def __init__(self, epochs=15, batch_size=64, n_locals=8, layers=("res2", "res3", "res4"), use_fs=True,
                 multicrop=True, widths=(32, 64, 128), K=256, K_fs=256, warmup_epochs=10, seed=0,
                 feature_layer="trunk", use_teacher=True, config=None):
        self.epochs = epochs
        self.batch_size = batch_size
        self.n_locals = n_locals
        self.layers = layers
        self.use_fs = use_fs
        self.multicrop = multicrop
        self.widths = widths
        self.K = K
        self.K_fs = K_fs
        self.warmup_epochs = warmup_epochs
        self.seed = seed
        self.feature_layer = feature_layer
        self.use_teacher = use_teacher
        self.config = config

    def make_config(self) -> TrainConfig:
        base = self.config if self.config is not None else TrainConfig()
        return base.replace(
            epochs=self.epochs, batch_size=self.batch_size, n_locals=self.n_locals, layers=tuple(self.layers),
            use_fs=self.use_fs, multicrop=self.multicrop, widths=tuple(self.widths), K=self.K, K_fs=self.K_fs,
            warmup_epochs=self.warmup_epochs, seed=self.seed,
        )

    def fit(self, X, y=None, **fit_params):
        X = check_images(X)
        cfg = self.make_config()
        result = fit(X, cfg, **fit_params)
        self.config_ = cfg
        self.state_ = result.state
        self.history_ = result.records
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_state(cls, state: TrainState, cfg: TrainConfig, **kwargs) -> "SCFSPretrainer":
        """Wrap an already trained state (e.g. a loaded checkpoint)."""
        est = cls(epochs=cfg.epochs, batch_size=cfg.batch_size, n_locals=cfg.n_locals, layers=cfg.layers,
                  use_fs=cfg.use_fs, multicrop=cfg.multicrop, widths=cfg.widths, K=cfg.K, K_fs=cfg.K_fs,
                  warmup_epochs=cfg.warmup_epochs, seed=cfg.seed, config=cfg, **kwargs)
        est.config_ = cfg
        est.state_ = state
        est.history_ = []
        return est

    @property
    def params_(self):
        check_is_fitted(self, "state_")
        return self.state_.teacher if self.use_teacher else self.state_.student

    def transform(self, X):
        check_is_fitted(self, "state_")
        X = check_images(X)
        return extract_features(self.params_, X, self.feature_layer, self.config_.global_size)


class KNNClassifier(ClassifierMixin, BaseEstimator):
    """Cosine-similarity k-NN with ``exp(sim / tau)`` weighted votes."""

    def __init__(self, k=20, tau=0.07):
        self.k = k
        self.tau = tau

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.X_ = X
        self.y_ = y_idx
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        X = check_array(X, dtype=np.float64)
        idx = knn_predict(self.X_, self.y_, X, min(self.k, len(self.X_)), self.tau, len(self.classes_))
        return self.classes_[idx]


class LinearProbeClassifier(ClassifierMixin, BaseEstimator):
    """Linear softmax classifier trained by SGD without weight decay."""

    def __init__(self, epochs=100, lr=None, batch_size=256, seed=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.coef_, self.intercept_ = train_linear(X, y_idx, len(self.classes_), self.epochs, self.lr,
                                                   self.batch_size, seed=self.seed)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float32)
        return X @ self.coef_.T + self.intercept_

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]
