"""Linear SVM (L1 hinge) by dual coordinate descent, with one-vs-one multiclass.

The bias is an augmented constant feature of value 1, so the objective
minimized is ``0.5 * (|w|^2 + b^2) + C * sum(hinge(1 - y * (w.x + b)))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numba
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


@dataclass
class BinarySvm:
    weights: np.ndarray
    bias: float
    C: float
    alpha: np.ndarray = field(repr=False, default=None)
    passes: int = 0
    gap: float = 0.0

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


@numba.njit(cache=True)
def _splitmix(state):
    state = (state + np.uint64(0x9E3779B97F4A7C15))
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return state, z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _dcd(Xa, y, C, tol, max_passes, seed):
    n, d = Xa.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qii = np.empty(n)
    for i in range(n):
        qii[i] = np.dot(Xa[i], Xa[i])
    order = np.arange(n)
    state = np.uint64(seed)
    gap = np.inf
    passes = 0
    while passes < max_passes:
        passes += 1
        # fresh random visiting order each pass; cyclic order can stall at large C
        for i in range(n - 1, 0, -1):
            state, r = _splitmix(state)
            j = int(r % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        for i in order:
            g = y[i] * np.dot(w, Xa[i]) - 1.0
            if alpha[i] == 0.0:
                pg = min(g, 0.0)
            elif alpha[i] == C:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0 and qii[i] > 0.0:
                old = alpha[i]
                alpha[i] = min(max(old - g / qii[i], 0.0), C)
                delta = (alpha[i] - old) * y[i]
                for j in range(d):
                    w[j] += delta * Xa[i, j]
        ww = np.dot(w, w)
        hinge = 0.0
        for i in range(n):
            hinge += max(0.0, 1.0 - y[i] * np.dot(w, Xa[i]))
        primal = 0.5 * ww + C * hinge
        dual = np.sum(alpha) - 0.5 * ww
        gap = primal - dual
        if gap <= tol * (1.0 + abs(primal)):
            break
    return w, alpha, passes, gap


def _augment(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def primal_objective(weights, bias, X, y, C) -> float:
    margins = y * (np.asarray(X, dtype=np.float64) @ weights + bias)
    return float(0.5 * (weights @ weights + bias * bias) + C * np.maximum(0.0, 1.0 - margins).sum())


def dual_objective(alpha, X, y) -> float:
    v = (alpha * y) @ _augment(np.asarray(X, dtype=np.float64))
    return float(alpha.sum() - 0.5 * v @ v)


def train_binary(X, y, C=1.0, tol=1e-6, max_passes=10_000, seed=0) -> BinarySvm:
    """Fit one machine on labels in {-1, +1}, stopping at a relative duality gap of ``tol``.

    ``seed`` fixes the per-pass coordinate order, so results are reproducible.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError(f"features {X.shape} and labels {y.shape} disagree")
    if not C > 0:
        raise ValueError(f"C must be positive, got {C}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("binary labels must be -1 or +1")
    if len(y) < 2 or np.all(y == y[0]):
        raise ValueError("binary SVM needs both classes present")
    w, alpha, passes, gap = _dcd(_augment(X), y, float(C), float(tol), int(max_passes),
                                  int(seed) & 0xFFFFFFFFFFFFFFFF)
    return BinarySvm(w[:-1].copy(), float(w[-1]), float(C), alpha, int(passes), float(gap))


@dataclass
class OvoSvm:
    class_count: int
    machines: dict  # (a, b) with a < b -> BinarySvm; positive side votes b

    def decision_values(self, X) -> dict:
        return {pair: m.decision_function(X) for pair, m in self.machines.items()}


def train_ovo(X, labels, C=1.0, class_count=None, **kw) -> OvoSvm:
    """One machine per class pair, each trained on that pair's samples only."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    c = int(labels.max()) + 1 if class_count is None else int(class_count)
    counts = np.bincount(labels, minlength=c)
    empty = np.flatnonzero(counts == 0)
    if len(empty):
        raise ValueError(f"class {int(empty[0])} has no training samples")
    machines = {}
    for a, b in combinations(range(c), 2):
        idx = np.flatnonzero((labels == a) | (labels == b))
        machines[(a, b)] = train_binary(X[idx], np.where(labels[idx] == b, 1.0, -1.0), C, **kw)
    return OvoSvm(c, machines)


def predict(model: OvoSvm, X) -> np.ndarray:
    """Plurality vote; ties go to the larger summed |decision|, then the lowest index.

    A machine's zero decision votes for its lower class.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, c = len(X), model.class_count
    votes = np.zeros((n, c))
    strength = np.zeros((n, c))
    rows = np.arange(n)
    for (a, b), m in model.machines.items():
        f = m.decision_function(X)
        winner = np.where(f > 0, b, a)
        votes[rows, winner] += 1
        strength[rows, winner] += np.abs(f)
    best = votes.max(axis=1, keepdims=True)
    score = np.where(votes == best, strength, -np.inf)
    return score.argmax(axis=1)


def svm_accuracy(model: OvoSvm, X, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot score an empty set")
    return float(np.mean(predict(model, X) == labels))


class OvoLinearSVC(ClassifierMixin, BaseEstimator):
    """One-vs-one linear SVM with an sklearn estimator interface.

    Features are used raw unless ``standardize`` is set, in which case they
    are centred and scaled with statistics from ``fit``.
    """

    def __init__(self, C=1.0, tol=1e-6, max_passes=10_000, standardize=False):
        self.C = C
        self.tol = tol
        self.max_passes = max_passes
        self.standardize = standardize

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        encoded = np.searchsorted(self.classes_, y)
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = X.std(axis=0)
            self.scale_[self.scale_ == 0] = 1.0
        else:
            self.mean_, self.scale_ = np.zeros(X.shape[1]), np.ones(X.shape[1])
        self.model_ = train_ovo((X - self.mean_) / self.scale_, encoded, self.C,
                                len(self.classes_), tol=self.tol, max_passes=self.max_passes)
        self.n_features_in_ = X.shape[1]
        return self

    def _prepare(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return (X - self.mean_) / self.scale_

    def predict(self, X):
        return self.classes_[predict(self.model_, self._prepare(X))]

    def decision_function(self, X):
        """Per-pair decision values, columns in ``combinations(classes_, 2)`` order."""
        vals = self.model_.decision_values(self._prepare(X))
        return np.column_stack([vals[p] for p in combinations(range(len(self.classes_)), 2)])
