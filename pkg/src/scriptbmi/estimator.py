"""scikit-learn compatible wrappers around the CNN and the preprocessing path."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import predict_bmi, split_counts
from .exceptions import DataError, InputError, ShapeError
from .imaging import preprocess
from .metrics import MetricsReport, confusion, weighted_metrics
from .model import ModelConfig, build_model
from .tensor import RngStream
from .training import DataSplits, TrainConfig, fit_network, predict_proba


def check_images(X, channels=None, ensure_min_samples=1) -> np.ndarray:
    """Validate an image batch and return it as float64 (N, C, H, W).

    A 3-D batch is read as single-channel (N, H, W).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4:
        raise ShapeError(f"expected images shaped (N, C, H, W), got {X.shape}")
    if X.shape[0] < ensure_min_samples:
        raise DataError(f"found {X.shape[0]} samples, need at least {ensure_min_samples}")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise InputError("images contain NaN or infinity")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ShapeError(f"expected {n_samples} labels, got shape {y.shape}")
    return y


def holdout_split(y, fraction: float, seed: int):
    """Stratified (train_idx, val_idx) with floor(fraction * n) per class held out."""
    gen = RngStream(seed, "holdout").generator()
    train_idx, val_idx = [], []
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        members = members[gen.permutation(len(members))]
        _, n_val, _ = split_counts(len(members), (1 - fraction, fraction, 0.0))
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    return np.sort(np.array(train_idx, dtype=np.int64)), np.sort(np.array(val_idx, dtype=np.int64))


class CNNClassifier(ClassifierMixin, BaseEstimator):
    """Character-image CNN trained with Adam and early stopping.

    Parameters mirror one ablation row plus the training hyperparameters.
    Defaults are the best ablation configuration with batch 32, learning
    rate 1e-4, up to 100 epochs and a patience of 10.

    ``fit`` accepts ``validation_data=(X_val, y_val)``; without it a
    stratified ``validation_fraction`` of the training data is held out.
    """

    def __init__(self, conv_kernels=(64, 128, 256), conv_dropout_pct=(0, 0, 0),
                 hidden_units=(512, 256, 128), hidden_dropout_pct=(50, 50, 50),
                 n_classes=None, batch_size=32, learning_rate=1e-4, max_epochs=100,
                 patience=10, validation_fraction=0.15, random_state=42):
        self.conv_kernels = conv_kernels
        self.conv_dropout_pct = conv_dropout_pct
        self.hidden_units = hidden_units
        self.hidden_dropout_pct = hidden_dropout_pct
        self.n_classes = n_classes
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    @classmethod
    def from_config(cls, cfg: ModelConfig, **kwargs) -> "CNNClassifier":
        return cls(conv_kernels=cfg.conv_kernels, conv_dropout_pct=cfg.conv_dropout_pct,
                   hidden_units=cfg.hidden_units, hidden_dropout_pct=cfg.hidden_dropout_pct,
                   n_classes=kwargs.pop("n_classes", cfg.num_classes), **kwargs)

    def _encode(self, y):
        if self.n_classes is not None:
            self.classes_ = np.arange(self.n_classes)
        else:
            self.classes_ = np.unique(y)
        return self._codes(y)

    def _codes(self, y):
        codes = np.searchsorted(self.classes_, y)
        codes = np.clip(codes, 0, len(self.classes_) - 1)
        if not np.array_equal(self.classes_[codes], y):
            raise InputError(f"labels outside the {len(self.classes_)} known classes")
        return codes.astype(np.int64)

    def fit(self, X, y, validation_data=None, test_data=None, callbacks=()):
        X = check_images(X)
        y = check_labels(y, len(X))
        codes = self._encode(y)
        if validation_data is None:
            tr, va = holdout_split(codes, self.validation_fraction, self.random_state)
            X_val, y_val = X[va], codes[va]
            X, codes = X[tr], codes[tr]
        else:
            X_val = check_images(validation_data[0], channels=X.shape[1])
            y_val = self._codes(check_labels(validation_data[1], len(X_val)))
        X_test = y_test = None
        if test_data is not None:
            X_test = check_images(test_data[0], channels=X.shape[1])
            y_test = self._codes(check_labels(test_data[1], len(X_test)))
        self.config_ = ModelConfig(self.conv_kernels, self.conv_dropout_pct, self.hidden_units,
                                   self.hidden_dropout_pct, num_classes=len(self.classes_),
                                   input_shape=X.shape[1:])
        self.train_config_ = TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs,
                                         learning_rate=self.learning_rate,
                                         early_stop_patience=self.patience, seed=self.random_state,
                                         input_size=X.shape[2:], channels=X.shape[1])
        self.network_ = build_model(self.config_, seed=self.random_state)
        data = DataSplits(X, codes, X_val, y_val, X_test, y_test)
        self.report_ = fit_network(self.network_, data, self.train_config_, callbacks)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X, channels=self.config_.input_shape[0])
        if X.shape[1:] != self.config_.input_shape:
            raise ShapeError(f"model expects images {self.config_.input_shape}, got {X.shape[1:]}")
        return predict_proba(self.network_, X)

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def evaluate(self, X, y) -> MetricsReport:
        check_is_fitted(self, "network_")
        codes = self._codes(check_labels(y, len(X)))
        cm = confusion(self.predict_proba(X).argmax(axis=1), codes, len(self.classes_))
        return weighted_metrics(cm)

    def predict_bmi(self, X, bmi_table) -> list[tuple[int, float, float]]:
        """(class, bmi, confidence) per image, using a class-indexed BMI table."""
        return [predict_bmi(p, bmi_table) for p in self.predict_proba(X)]


class CharPreprocessor(TransformerMixin, BaseEstimator):
    """uint8 crops -> float64 (N, C, H, W): median denoise, bilinear resize, /255."""

    def __init__(self, size=(224, 224), channels=3, denoise=True):
        self.size = size
        self.channels = channels
        self.denoise = denoise

    def fit(self, X, y=None):
        if len(X) == 0:
            raise DataError("no images to fit on")
        self.n_features_in_ = self.channels * int(np.prod(self.size))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        size = (self.size, self.size) if isinstance(self.size, int) else tuple(self.size)
        return np.stack([preprocess(np.asarray(img, dtype=np.uint8), size, self.channels, self.denoise)
                         for img in X])
