"""Downstream model zoo fitted on (transformed) covariates.

Deliberately dependency-free stand-ins for the models an end user might pick:
logistic regression (full-batch gradient descent), brute-force KNN, a small
MLP (half the upstream hidden width) and a random-Fourier-feature linear
model.  None of them ever sees the sensitive attributes; fitted models are
immutable and their ``score`` is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Adam, DenseNet, softmax

KINDS = ("logistic_regression", "knn", "small_mlp", "random_feature_linear")

SMALL_MLP_WIDTH = 32  # half the upstream default hidden width
SMALL_MLP_DEPTH = 3


class FitError(ValueError):
    """Invalid inputs to model fitting or scoring."""


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _infer_task(y: np.ndarray, task: str | None) -> str:
    if task is not None:
        if task not in ("classification", "regression"):
            raise FitError(f"unknown task {task!r}")
        return task
    return "classification" if np.all(np.isin(y, (0.0, 1.0))) else "regression"


@dataclass(frozen=True)
class FeatureMap:
    """Deterministic feature engineering map applied before a downstream fit."""

    kind: str
    input_dim: int
    output_dim: int
    frequencies: np.ndarray | None = None
    offsets: np.ndarray | None = None

    @classmethod
    def identity(cls, dim: int) -> "FeatureMap":
        return cls("identity", dim, dim)

    @classmethod
    def random_fourier(cls, input_dim: int, output_dim: int, gamma: float,
                       seed: int = 0) -> "FeatureMap":
        """Cosine features approximating a Gaussian kernel of bandwidth gamma."""
        if gamma <= 0:
            raise FitError("gamma must be > 0")
        rng = np.random.default_rng(seed)
        freq = rng.normal(0.0, np.sqrt(2.0 * gamma), size=(input_dim, output_dim))
        offs = rng.uniform(0.0, 2.0 * np.pi, size=output_dim)
        return cls("random_fourier", input_dim, output_dim, freq, offs)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise FitError(f"expected input (n, {self.input_dim}), got {x.shape}")
        if self.kind == "identity":
            return x
        return np.sqrt(2.0 / self.output_dim) * np.cos(x @ self.frequencies + self.offsets)


def median_heuristic_gamma(x: np.ndarray, cap: int = 500, seed: int = 0) -> float:
    """Gaussian-kernel bandwidth from the median squared pairwise distance."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] > cap:
        idx = np.random.default_rng(seed).choice(x.shape[0], size=cap, replace=False)
        x = x[idx]
    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
    med = np.median(sq[np.triu_indices_from(sq, k=1)])
    return 1.0 / max(med, 1e-12)


class DownstreamModel:
    """A fitted downstream predictor; ``score`` maps covariates to [0, 1]
    (classification) or the real line (regression)."""

    def __init__(self, kind: str, task: str, scorer, in_dim: int,
                 feature_map: FeatureMap | None = None):
        self.kind = kind
        self.task = task
        self._scorer = scorer
        self.in_dim = in_dim
        self.feature_map = feature_map

    def score(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise FitError(f"expected input (n, {self.in_dim}), got {x.shape}")
        if self.feature_map is not None:
            x = self.feature_map.apply(x)
        return self._scorer(x)


def _fit_logistic(x: np.ndarray, y: np.ndarray, lr: float | None, max_iter: int,
                  l2: float):
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    if lr is None:
        lr = 2.0 / max(1.0, float(np.mean(np.sum(xb * xb, axis=1))))
    w = np.zeros(xb.shape[1])
    n = xb.shape[0]
    for _ in range(max_iter):
        p = _sigmoid(xb @ w)
        grad = xb.T @ (p - y) / n
        grad[:-1] += l2 * w[:-1]
        w = w - lr * grad
    return lambda q: _sigmoid(np.hstack([q, np.ones((q.shape[0], 1))]) @ w)


def _fit_knn(x: np.ndarray, y: np.ndarray, k: int):
    x_train, y_train = x.copy(), y.copy()

    def scorer(q: np.ndarray) -> np.ndarray:
        out = np.empty(q.shape[0])
        chunk = max(1, int(2e7) // max(1, x_train.shape[0]))
        for s in range(0, q.shape[0], chunk):
            block = q[s:s + chunk]
            d2 = np.sum((block[:, None, :] - x_train[None, :, :]) ** 2, axis=2)
            idx = np.argpartition(d2, kth=min(k, d2.shape[1]) - 1, axis=1)[:, :k]
            out[s:s + chunk] = y_train[idx].mean(axis=1)
        return out

    return scorer


def _fit_small_mlp(x: np.ndarray, y: np.ndarray, task: str, seed: int,
                   epochs: int, batch_size: int, lr: float):
    out_dim = 2 if task == "classification" else 1
    dims = [x.shape[1]] + [SMALL_MLP_WIDTH] * SMALL_MLP_DEPTH + [out_dim]
    acts = ["relu"] * SMALL_MLP_DEPTH + (["softmax"] if task == "classification" else ["identity"])
    net = DenseNet(dims, acts, seed=seed)
    opt = Adam(lr=lr, beta1=0.9)
    rng = np.random.default_rng(seed + 1)
    n = x.shape[0]
    target = np.stack([1.0 - y, y], axis=1) if task == "classification" else y[:, None]
    for _ in range(epochs):
        for idx in np.array_split(rng.permutation(n), max(1, n // batch_size)):
            if idx.size == 0:
                continue
            out = net.forward(x[idx], training=True)
            if task == "classification":
                p = np.clip(out, 1e-7, 1 - 1e-7)
                grad = -target[idx] / p / idx.size
            else:
                grad = 2.0 * (out - target[idx]) / idx.size
            opt.step(net.parameters(), net.backward(grad))

    if task == "classification":
        return lambda q: net.forward(q)[:, 1]
    return lambda q: net.forward(q)[:, 0]


def _fit_random_feature_linear(x: np.ndarray, y: np.ndarray, task: str, seed: int,
                               n_features: int, gamma: float | None,
                               max_iter: int, ridge: float):
    if gamma is None:
        gamma = median_heuristic_gamma(x, seed=seed)
    fmap = FeatureMap.random_fourier(x.shape[1], n_features, gamma, seed=seed)
    z = fmap.apply(x)
    if task == "classification":
        inner = _fit_logistic(z, y, lr=None, max_iter=max_iter, l2=1e-6)
    else:
        zb = np.hstack([z, np.ones((z.shape[0], 1))])
        w = np.linalg.solve(zb.T @ zb + ridge * np.eye(zb.shape[1]), zb.T @ y)
        inner = lambda q: np.hstack([q, np.ones((q.shape[0], 1))]) @ w
    return lambda q: inner(fmap.apply(q))


def fit(kind: str, x: np.ndarray, y: np.ndarray, *, seed: int = 0,
        task: str | None = None, k: int = 15, epochs: int = 40,
        batch_size: int = 128, lr: float = 5e-3, max_iter: int = 800,
        l2: float = 1e-6, n_features: int = 200, gamma: float | None = None,
        ridge: float = 1e-6) -> DownstreamModel:
    """Fit one zoo member on ``(x, y)``; sensitive attributes never enter.

    ``task`` defaults to classification when ``y`` is 0/1.  Classifiers
    require both classes present.
    """
    if kind not in KINDS:
        raise FitError(f"unknown downstream kind {kind!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise FitError("x rows and y must align")
    task = _infer_task(y, task)
    if task == "classification":
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise FitError("classification labels must be 0/1")
        if y.min() == y.max():
            raise FitError("classifier fit needs both classes present")
    if kind == "logistic_regression":
        if task == "regression":
            raise FitError("logistic_regression is classification-only")
        scorer = _fit_logistic(x, y, lr=None, max_iter=max_iter, l2=l2)
    elif kind == "knn":
        scorer = _fit_knn(x, y, k=k)
    elif kind == "small_mlp":
        scorer = _fit_small_mlp(x, y, task, seed, epochs, batch_size, lr)
    else:
        scorer = _fit_random_feature_linear(x, y, task, seed, n_features, gamma,
                                            max_iter, ridge)
    return DownstreamModel(kind, task, scorer, in_dim=x.shape[1])


def score(model: DownstreamModel, x: np.ndarray) -> np.ndarray:
    """Functional alias for :meth:`DownstreamModel.score`."""
    return model.score(x)


def compose(feature_map: FeatureMap, kind: str, x: np.ndarray, y: np.ndarray,
            **kwargs) -> DownstreamModel:
    """Fit ``kind`` on engineered features; the result scores raw covariates."""
    x = np.asarray(x, dtype=np.float64)
    inner = fit(kind, feature_map.apply(x), y, **kwargs)
    return DownstreamModel(kind, inner.task, inner._scorer, in_dim=x.shape[1],
                           feature_map=feature_map)
