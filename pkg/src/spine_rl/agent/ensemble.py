"""Bootstrap ensemble of safe-distance regressors."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y
from torch import nn

from .networks import mlp_head


def ensemble_stats(predictions) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation across heads (last axis).

    With head outputs l_i the mean is sum(l_i)/n and the variance
    sum((l_i - mean)^2)/n.
    """
    p = np.asarray(predictions, dtype=float)
    mean = p.mean(axis=-1)
    var = ((p - mean[..., None]) ** 2).mean(axis=-1)
    return mean, np.sqrt(var)


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return ((pred - target) ** 2).mean()


def fit_heads(heads, X: torch.Tensor, y: torch.Tensor, *, epochs=2, batch_size=256, lr=1e-3,
              rng: np.random.Generator, optimizers=None, bootstrap=True) -> list[float]:
    """Train each head on its own bootstrap resample of (X, y) with MSE.

    ``y`` must already be normalized. Returns the final full-data MSE of each head.
    """
    n = len(X)
    if n == 0:
        raise ValueError("cannot train safety heads on an empty buffer")
    if optimizers is None:
        optimizers = [torch.optim.Adam(h.parameters(), lr=lr) for h in heads]
    for head, opt in zip(heads, optimizers):
        sample = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        for _ in range(epochs):
            order = sample[rng.permutation(n)]
            for start in range(0, n, batch_size):
                idx = torch.as_tensor(order[start:start + batch_size])
                loss = mse_loss(head(X[idx]).squeeze(-1), y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
    with torch.no_grad():
        return [float(mse_loss(h(X).squeeze(-1), y)) for h in heads]


class SafeDistanceEnsemble(BaseEstimator, RegressorMixin):
    """Five-head bootstrap ensemble regressing safe distance from features.

    Parameters
    ----------
    n_heads : int
        Number of independently resampled heads.
    hidden : int
        Hidden width of each two-layer head.
    scale : float
        Targets are divided by ``scale`` during training (the sweep horizon).
    epochs, batch_size, learning_rate : training schedule per head.
    bootstrap : bool
        Resample the data with replacement per head; otherwise every head
        sees the full data set.
    random_state : int
        Seeds head initialization and resampling.
    """

    def __init__(self, n_heads=5, hidden=128, scale=150.0, epochs=200, batch_size=64,
                 learning_rate=1e-3, bootstrap=True, random_state=0):
        self.n_heads = n_heads
        self.hidden = hidden
        self.scale = scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.bootstrap = bootstrap
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        torch.manual_seed(self.random_state)
        self.heads_ = nn.ModuleList(
            [mlp_head(X.shape[1], self.hidden, 1) for _ in range(self.n_heads)]).double()
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.random_state)
        self.train_mse_ = fit_heads(
            self.heads_, torch.as_tensor(X), torch.as_tensor(y / self.scale), epochs=self.epochs,
            batch_size=self.batch_size, lr=self.learning_rate, rng=rng, bootstrap=self.bootstrap)
        return self

    def predict_heads(self, X) -> np.ndarray:
        check_is_fitted(self, "heads_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        with torch.no_grad():
            xt = torch.as_tensor(X)
            out = torch.cat([h(xt) for h in self.heads_], dim=-1)
        return out.numpy() * self.scale

    def predict(self, X) -> np.ndarray:
        return ensemble_stats(self.predict_heads(X))[0]

    def predict_stats(self, X) -> tuple[np.ndarray, np.ndarray]:
        return ensemble_stats(self.predict_heads(X))
