"""sklearn-compatible wrapper around the network builders and training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .arch import build, extract_features, predict_proba
from .data import resize_bilinear
from .train import TrainConfig, train


def check_images(X, size=None):
    """Validate a stack of square grayscale images, shape (n, s, s) or (n, 1, s, s)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images of shape (n, s, s), got {X.shape}")
    if len(X) == 0:
        raise ValueError("found an empty image array")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    if size is not None and X.shape[1] != size:
        raise ValueError(f"images are {X.shape[1]}px but the model was fit on {size}px")
    return X


class CNNClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Image classifier backed by ClassicCNN, TinyNet or FireNet.

    ``transform`` returns the FC(m) activations of a fitted ClassicCNN, which
    is how the network is used as a transfer-learning feature extractor.
    """

    def __init__(self, arch="classic", regularizer="bn", optimizer="adam", learning_rate=0.001,
                 batch_size=128, epochs=30, feature_size=64, dropout=0.5, random_state=42):
        self.arch = arch
        self.regularizer = regularizer
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.feature_size = feature_size
        self.dropout = dropout
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        encoded = np.searchsorted(self.classes_, y)
        spec = build(self.arch, X.shape[1], len(self.classes_), self.regularizer,
                     self.feature_size, self.dropout)
        config = TrainConfig(self.optimizer, self.learning_rate, self.batch_size, self.epochs,
                             int(self.random_state))
        self.model_, self.history_ = train(spec, (X, encoded), config)
        self.image_size_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, check_images(X, self.image_size_))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        check_is_fitted(self, "model_")
        return extract_features(self.model_, check_images(X, self.image_size_))


class ImageResizer(TransformerMixin, BaseEstimator):
    """Stateless bilinear resize of (n, s, s) image stacks to ``size`` pixels."""

    def __init__(self, size=96):
        self.size = size

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X):
        return resize_bilinear(check_images(X), self.size)
