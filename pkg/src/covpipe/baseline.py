"""Histogram features and an L2-regularized logistic model trained by
full-batch gradient descent. Stands in for the neural classifiers so the
whole pipeline runs on phantoms.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .validation import check_volume, check_volumes
from .volume_io import Volume

N_HIST_BINS = 32
N_FEATURES = N_HIST_BINS + 3


def extract_features(v: Volume) -> np.ndarray:
    """32 histogram frequencies on [0, 1], then mean, std and 90th percentile.

    Bin ``k`` covers ``[k/32, (k+1)/32)``; the last bin also takes 1.0.
    """
    data = check_volume(v).data.ravel()
    codes = np.minimum((data * N_HIST_BINS).astype(np.int64), N_HIST_BINS - 1)
    hist = np.bincount(codes, minlength=N_HIST_BINS) / data.size
    d64 = data.astype(np.float64)
    stats = [d64.mean(), d64.std(), np.percentile(d64, 90)]
    return np.concatenate([hist, stats])


class HistogramFeatures(BaseEstimator, TransformerMixin):
    def fit(self, X, y=None):
        check_volumes(X)
        return self

    def transform(self, X):
        return np.vstack([extract_features(v) for v in check_volumes(X)])


def logistic_loss(w, b, Z, y, l2):
    """Mean logistic loss plus ``l2 / 2 * ||w||^2``, with its gradient."""
    s = Z @ w + b
    loss = np.mean(np.logaddexp(0.0, s) - y * s) + 0.5 * l2 * (w @ w)
    r = expit(s) - y
    grad_w = Z.T @ r / len(y) + l2 * w
    grad_b = r.mean()
    return loss, grad_w, grad_b


class BaselineClassifier(BaseEstimator, ClassifierMixin):
    """Binary logistic regression, class 1 = COVID.

    Gradient descent runs on standardized features (the standardization is
    fixed at the first ``fit`` and reused by :meth:`fine_tune`). The step is
    capped at ``1 / L`` for the loss's gradient Lipschitz constant ``L``, so
    the training loss never increases. ``coef_`` and ``intercept_`` are
    expressed on the raw features.
    """

    def __init__(self, epochs=300, lr=0.5, l2=0.1, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.l2 = l2
        self.random_state = random_state

    def _check_y(self, y):
        y = np.asarray(y)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 (NON_COVID) or 1 (COVID)")
        if len(np.unique(y)) < 2:
            raise ValueError("training data must contain both classes")
        return y.astype(np.float64)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = self._check_y(y)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        rng = np.random.default_rng(self.random_state)
        self.w_ = rng.normal(0.0, 0.01, X.shape[1])
        self.b_ = 0.0
        self.loss_curve_ = []
        self._descend(X, y, self.epochs, self.lr)
        return self

    def _descend(self, X, y, epochs, lr):
        Z = (X - self.mean_) / self.scale_
        A = np.hstack([Z, np.ones((len(Z), 1))])
        lipschitz = 0.25 * np.linalg.norm(A, 2) ** 2 / len(Z) + self.l2
        step = min(lr, 1.0 / lipschitz)
        w, b = self.w_.copy(), self.b_
        loss, gw, gb = logistic_loss(w, b, Z, y, self.l2)
        curve = [loss]
        for _ in range(epochs):
            w -= step * gw
            b -= step * gb
            loss, gw, gb = logistic_loss(w, b, Z, y, self.l2)
            curve.append(loss)
        self.w_, self.b_ = w, float(b)
        self.loss_curve_ = list(self.loss_curve_) + (curve if not self.loss_curve_ else curve[1:])
        self._sync_raw()

    def _sync_raw(self):
        self.coef_ = self.w_ / self.scale_
        self.intercept_ = float(self.b_ - self.coef_ @ self.mean_)

    def fine_tune(self, X, y, epochs=None, lr=None):
        """Continue descent from the current weights; returns a new model.

        ``epochs`` defaults to a third of the base training epochs.
        """
        check_is_fitted(self, "w_")
        X, y = check_X_y(X, y, dtype=np.float64)
        y = self._check_y(y)
        epochs = self.epochs // 3 if epochs is None else epochs
        lr = self.lr if lr is None else lr
        tuned = copy.deepcopy(self)
        tuned.loss_curve_ = []
        if epochs > 0 and lr > 0:
            tuned._descend(X, y, epochs, lr)
        return tuned

    def decision_function(self, X):
        check_is_fitted(self, "w_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (expit(self.decision_function(X)) >= 0.5).astype(int)

    def negated(self) -> "BaselineClassifier":
        m = copy.deepcopy(self)
        m.w_, m.b_ = -m.w_, -m.b_
        m._sync_raw()
        return m

    def to_dict(self) -> dict:
        check_is_fitted(self, "w_")
        return {
            "weights": [float(x) for x in self.coef_],
            "bias": self.intercept_,
            "epochs": self.epochs,
            "lr": self.lr,
            "l2": self.l2,
            "seed": self.random_state,
            "feature_mean": [float(x) for x in self.mean_],
            "feature_scale": [float(x) for x in self.scale_],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineClassifier":
        m = cls(epochs=d["epochs"], lr=d["lr"], l2=d["l2"], random_state=d["seed"])
        coef = np.asarray(d["weights"], dtype=np.float64)
        m.classes_ = np.array([0, 1])
        m.n_features_in_ = len(coef)
        m.mean_ = np.asarray(d.get("feature_mean", np.zeros_like(coef)), dtype=np.float64)
        m.scale_ = np.asarray(d.get("feature_scale", np.ones_like(coef)), dtype=np.float64)
        m.coef_, m.intercept_ = coef, float(d["bias"])
        m.w_ = coef * m.scale_
        m.b_ = m.intercept_ + float(coef @ m.mean_)
        m.loss_curve_ = []
        if not (np.isfinite(m.coef_).all() and np.isfinite(m.intercept_)):
            raise ValueError("model parameters must be finite")
        return m

    @classmethod
    def load(cls, path) -> "BaselineClassifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train(features, labels, epochs=300, lr=0.5, l2=0.1, seed=0) -> BaselineClassifier:
    return BaselineClassifier(epochs=epochs, lr=lr, l2=l2, random_state=seed).fit(features, labels)


def predict(model: BaselineClassifier, features) -> float:
    """Probability of COVID for one feature vector."""
    return float(model.predict_proba(np.atleast_2d(features))[0, 1])


def fine_tune(model: BaselineClassifier, features, labels, epochs=None, lr=None) -> BaselineClassifier:
    return model.fine_tune(features, labels, epochs=epochs, lr=lr)
