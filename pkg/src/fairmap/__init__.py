"""Fairness-aware tabular pre-processing with downstream-model evaluation.

The package learns a data transformation (covariates and, optionally, labels)
so that models trained on the transformed data are less dependent on sensitive
attributes, at a controlled distortion budget.  It ships four building blocks:

* :mod:`fairmap.nn` - a small dense-network engine (forward/backward/Adam)
  used by every learned component,
* :mod:`fairmap.hgr` - maximal-correlation estimation (exact discrete oracle
  and a neural chi-square-dual estimator),
* :mod:`fairmap.preprocess` - the constrained min-max trainer and transform API,
* :mod:`fairmap.downstream` / :mod:`fairmap.metrics` / :mod:`fairmap.data` -
  the model zoo, the fairness/utility metrics and the dataset pipeline.

See the ``demos/`` directory for narrative end-to-end scripts and
``fairmap.cli`` for the config-driven experiment runner.
"""

__version__ = "0.1.0"

from . import data, downstream, hgr, metrics, nn, preprocess

__all__ = ["data", "downstream", "hgr", "metrics", "nn", "preprocess", "__version__"]
