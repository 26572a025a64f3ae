"""Shared fixtures: cached training runs reused across test modules.

The heavy bilevel runs are memoized per (scenario, seed) so that module tests
and the acceptance suite share work regardless of execution order.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from fairmap import data, downstream, metrics, preprocess

FIG2_LAMBDAS = (0.1, 2.0, 20.0)
FIG2_DELTA_X = 0.25
FIG2_DELTA_Y = 1.0
FIG2_SEEDS = (0, 1, 2)
REG_ZOO = ("knn", "small_mlp", "random_feature_linear")

HARD_TOY = dict(n=5000, label_noise=0.3, test_fraction=0.2)
HARD_SEEDS = (0, 1, 2)


def regression_toy(seed: int):
    full = data.toy_regression(5260, seed=seed)
    return data.split(full, 760 / 5260, seed)


def fig2_train(lam: float, seed: int, epochs: int = 100):
    """One constrained run on the regression toy plus its evaluation bundle."""
    train, test = regression_toy(seed)
    cfg = preprocess.PreprocessorConfig(
        delta_x=FIG2_DELTA_X, delta_y=FIG2_DELTA_Y, lambda_f=lam,
        epochs=epochs, batch_size=200, seed=seed)
    t0 = time.monotonic()
    pp = preprocess.train(train, cfg)
    elapsed = time.monotonic() - t0
    xt_tr = pp.transform_covariates(train.x, train.a)
    yt_tr = pp.transform_outcome(train.x, train.a, train.y)
    xt_te = pp.transform_covariates(test.x, test.a)
    groups, _ = data.group_ids(test.a)
    evals = {}
    scores_up = pp.upstream_scores(xt_te)
    evals["upstream"] = {
        "gap": metrics.score_group_gap(scores_up, groups),
        "mse": float(np.mean((test.y - scores_up) ** 2)),
        "scores": scores_up,
    }
    for i, kind in enumerate(REG_ZOO):
        model = downstream.fit(kind, xt_tr, yt_tr, seed=seed + i, task="regression")
        s = model.score(xt_te)
        evals[kind] = {"gap": metrics.score_group_gap(s, groups),
                       "mse": float(np.mean((test.y - s) ** 2)), "scores": s}
    return {"pp": pp, "train": train, "test": test, "evals": evals,
            "elapsed": elapsed, "lam": lam, "seed": seed,
            "xt_train": xt_tr, "yt_train": yt_tr, "xt_test": xt_te}


def hard_toy_train(delta_y: float, seed: int, epochs: int = 150):
    """One run on the noisy-label classification toy (the 'hard' variant)."""
    full = data.toy_classification(HARD_TOY["n"], seed=seed,
                                   label_noise=HARD_TOY["label_noise"])
    train, test = data.split(full, HARD_TOY["test_fraction"], seed)
    cfg = preprocess.PreprocessorConfig(
        delta_x=0.3, delta_y=delta_y, lambda_f=5.0, epochs=epochs,
        batch_size=200, seed=seed)
    t0 = time.monotonic()
    pp = preprocess.train(train, cfg)
    elapsed = time.monotonic() - t0
    xt_tr = pp.transform_covariates(train.x, train.a)
    yt_tr = pp.transform_outcome(train.x, train.a, train.y)
    xt_te = pp.transform_covariates(test.x, test.a)
    yt_te = pp.transform_outcome(test.x, test.a, test.y)
    aucs = {}
    for i, kind in enumerate(downstream.KINDS):
        model = downstream.fit(kind, xt_tr, yt_tr, seed=seed + i)
        aucs[kind] = metrics.auc(model.score(xt_te), yt_te)
    return {"pp": pp, "train": train, "test": test, "aucs": aucs,
            "elapsed": elapsed, "yt_train": yt_tr, "xt_train": xt_tr}


@pytest.fixture(scope="session")
def fig2_runs():
    """Memoizing factory for the regression trade-off runs."""
    cache: dict = {}

    def get(lam: float, seed: int):
        key = (lam, seed)
        if key not in cache:
            cache[key] = fig2_train(lam, seed)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def hard_toy_runs():
    """Memoizing factory for the noisy-label label-budget runs."""
    cache: dict = {}

    def get(delta_y: float, seed: int):
        key = (delta_y, seed)
        if key not in cache:
            cache[key] = hard_toy_train(delta_y, seed)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def strong_clf_run():
    """A strongly penalized independence run on the classification toy."""
    full = data.toy_classification(3000, seed=5)
    train, test = data.split(full, 0.25, 5)
    cfg = preprocess.PreprocessorConfig(delta_x=0.5, delta_y=0.0, lambda_f=10.0,
                                        epochs=100, batch_size=200, seed=5)
    pp = preprocess.train(train, cfg)
    return {"pp": pp, "train": train, "test": test,
            "xt_train": pp.transform_covariates(train.x, train.a),
            "xt_test": pp.transform_covariates(test.x, test.a)}
