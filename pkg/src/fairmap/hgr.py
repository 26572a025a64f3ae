"""Maximal-correlation (HGR) estimation and its chi-square dual surrogate.

Three routes to the same quantity:

* :func:`hgr_exact_discrete` - ground-truth oracle for tabulated joints via
  the SVD of the normalized joint matrix,
* :func:`chi2_dual_objective` / :func:`estimate_hgr_independence` /
  :func:`estimate_hgr_separation` - the sampling-based neural dual estimator
  used inside training (``sup_V E_joint[V] - E_product[f*(V)]`` with
  ``f*(x) = x^2/4 + x`` upper-bounds the squared correlation),
* :func:`d_metric` - the distance-like map ``sqrt(2 - 2 rho)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nn import Adam, DenseNet


class InputError(ValueError):
    """Invalid inputs to an HGR operation."""


def f_star(x: np.ndarray | float):
    """Convex conjugate of the chi-square generator: ``x^2/4 + x``."""
    return np.square(x) / 4.0 + x


@dataclass(frozen=True)
class DiscreteJoint:
    """A tabulated joint distribution over two finite variables."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2:
            raise InputError("joint table must be 2-d")
        if np.any(probs < -1e-15):
            raise InputError("joint table has negative entries")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise InputError(f"joint table sums to {probs.sum()}, not 1")
        if np.any(self.row_marginal <= 0.0) or np.any(self.col_marginal <= 0.0):
            raise InputError("every category must have positive marginal probability")

    @property
    def row_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=1)

    @property
    def col_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` index pairs from the joint."""
        flat = self.probs.ravel()
        idx = rng.choice(flat.size, size=n, p=flat / flat.sum())
        return np.divmod(idx, self.probs.shape[1])


def random_discrete_joint(k1: int, k2: int, rng: np.random.Generator,
                          concentration: float = 1.0) -> DiscreteJoint:
    """Dirichlet-random joint table with strictly positive marginals."""
    probs = rng.gamma(concentration, size=(k1, k2)) + 1e-6
    return DiscreteJoint(probs / probs.sum())


def merge_categories(joint: DiscreteJoint, i: int, j: int) -> DiscreteJoint:
    """Merge categories ``i`` and ``j`` of the first variable (a measurable map)."""
    if i == j:
        raise InputError("categories to merge must differ")
    probs = joint.probs
    keep = [r for r in range(probs.shape[0]) if r != j]
    merged = probs[keep].copy()
    merged[keep.index(i)] += probs[j]
    return DiscreteJoint(merged)


def hgr_exact_discrete(joint: DiscreteJoint) -> float:
    """Exact maximal correlation of a tabulated joint.

    Second-largest singular value of ``Q`` with
    ``Q[i, j] = P[i, j] / sqrt(p[i] q[j])``; the largest is always 1.
    """
    p = joint.row_marginal
    q = joint.col_marginal
    quotient = joint.probs / np.sqrt(np.outer(p, q))
    sv = np.linalg.svd(quotient, compute_uv=False)
    if sv.size < 2:
        return 0.0
    return float(min(max(sv[1], 0.0), 1.0))


def chi2_divergence(joint: DiscreteJoint) -> float:
    """Exact chi-square divergence between the joint and its product measure."""
    prod = np.outer(joint.row_marginal, joint.col_marginal)
    return float(np.sum(np.square(joint.probs - prod) / prod))


def chi2_dual_objective(v_joint: np.ndarray, v_product: np.ndarray) -> float:
    """Sampled dual value ``mean(V_joint) - mean(f*(V_product))``."""
    v_joint = np.asarray(v_joint, dtype=np.float64)
    v_product = np.asarray(v_product, dtype=np.float64)
    if v_joint.size == 0 or v_product.size == 0:
        raise InputError("dual objective needs non-empty samples")
    return float(np.mean(v_joint) - np.mean(f_star(v_product)))


def chi2_dual_exact(joint: DiscreteJoint, critic_table: np.ndarray) -> float:
    """Exact-expectation dual value of a tabulated critic; never exceeds chi-square."""
    v = np.asarray(critic_table, dtype=np.float64)
    if v.shape != joint.probs.shape:
        raise InputError("critic table must match the joint table shape")
    prod = np.outer(joint.row_marginal, joint.col_marginal)
    return float(np.sum(joint.probs * v) - np.sum(prod * f_star(v)))


def d_metric(rho: float) -> float:
    """Distance-like metric ``sqrt(2 - 2 rho)``; 0 under functional dependence,
    ``sqrt(2)`` under independence."""
    if not 0.0 <= rho <= 1.0:
        raise InputError(f"rho must lie in [0, 1], got {rho}")
    return float(np.sqrt(2.0 - 2.0 * rho))


# ---------------------------------------------------------------------------
# Neural dual estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HgrEstimate:
    """Result of the neural dual estimator.

    ``r_value`` is the raw dual objective (the quantity penalized during
    training); ``rho_hat = sqrt(clip(r_value, 0, 1))`` is the reported
    correlation scale.
    """

    r_value: float
    rho_hat: float
    degenerate: bool = False
    small_strata: bool = False

    @classmethod
    def from_r(cls, r: float, **flags) -> "HgrEstimate":
        rho = float(np.sqrt(min(max(r, 0.0), 1.0)))
        return cls(r_value=float(r), rho_hat=rho, **flags)


def make_critic(input_dim: int, seed: int = 0, width: int = 64, depth: int = 3) -> DenseNet:
    """Default critic: ``depth`` dense-relu layers of ``width`` and a scalar head."""
    dims = [input_dim] + [width] * depth + [1]
    return DenseNet(dims, seed=seed)


def _as_score_matrix(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
    if scores.ndim != 2 or scores.shape[1] != 1:
        raise InputError("scores must be a vector")
    return scores


def _stratified_permutation(y: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Permutation that shuffles indices only within equal-``y`` strata."""
    perm = np.arange(y.size)
    small = False
    for level in np.unique(y):
        idx = np.flatnonzero(y == level)
        if idx.size == 1:
            small = True  # singleton stratum keeps its identity pairing
            continue
        perm[idx] = idx[rng.permutation(idx.size)]
    return perm, small


def _dual_ascent(critic: DenseNet, joint_in: np.ndarray, product_in,
                 steps: int, rng: np.random.Generator, lr: float,
                 batch_size: int, final_products: int) -> float:
    """Train the critic by ascent on the sampled dual; return the final value.

    ``product_in`` builds the product-measure batch from row indices (the
    permutation scheme differs between independence and separation).
    """
    n = joint_in.shape[0]
    opt = Adam(lr=lr)
    for _ in range(steps):
        if n > batch_size:
            idx = rng.choice(n, size=batch_size, replace=False)
        else:
            idx = np.arange(n)
        jb = joint_in[idx]
        pb = product_in(idx)
        v_j = critic.forward(jb, training=True)
        g_j = critic.backward(np.full_like(v_j, 1.0 / v_j.shape[0]))
        v_p = critic.forward(pb, training=True)
        g_p = critic.backward(-(v_p / 2.0 + 1.0) / v_p.shape[0])
        grads = [a + b for a, b in zip(g_j, g_p)]
        opt.step(critic.parameters(), [-g for g in grads])  # ascent
    joint_term = float(np.mean(critic.forward(joint_in)))
    product_terms = []
    for _ in range(final_products):
        pb = product_in(np.arange(n))
        product_terms.append(float(np.mean(f_star(critic.forward(pb)))))
    return joint_term - float(np.mean(product_terms))


def estimate_hgr_independence(scores: np.ndarray, sensitive: np.ndarray,
                              critic: DenseNet | None = None, steps: int = 300,
                              rng: np.random.Generator | int | None = None,
                              lr: float = 8e-3, batch_size: int = 1024,
                              final_products: int = 16) -> HgrEstimate:
    """Estimate ``rho(scores, A)`` by chi-square-dual ascent.

    Product-measure samples pair each score with a uniformly permuted
    sensitive row.  Constant scores short-circuit to ``rho_hat = 0`` with a
    warning flag.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    scores = _as_score_matrix(scores)
    sensitive = np.asarray(sensitive, dtype=np.float64)
    if sensitive.ndim != 2 or sensitive.shape[0] != scores.shape[0]:
        raise InputError("scores and sensitive rows must align")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if np.ptp(scores) < 1e-12:
        warnings.warn("scores are constant; HGR estimate degenerates to 0")
        return HgrEstimate.from_r(0.0, degenerate=True)
    std = scores.std()
    scores = (scores - scores.mean()) / std
    joint_in = np.hstack([scores, sensitive])
    if critic is None:
        critic = make_critic(joint_in.shape[1], seed=int(rng.integers(2**31)))

    def product_in(idx: np.ndarray) -> np.ndarray:
        perm = rng.permutation(idx.size)
        return np.hstack([scores[idx], sensitive[idx][perm]])

    r = _dual_ascent(critic, joint_in, product_in, steps, rng, lr, batch_size,
                     final_products)
    return HgrEstimate.from_r(r)


def estimate_hgr_separation(scores: np.ndarray, sensitive: np.ndarray,
                            outcome: np.ndarray, critic: DenseNet | None = None,
                            steps: int = 300,
                            rng: np.random.Generator | int | None = None,
                            lr: float = 8e-3, batch_size: int = 1024,
                            final_products: int = 16) -> HgrEstimate:
    """Estimate the conditional (given-outcome) HGR via the separation dual.

    Identical ascent, except the critic consumes ``(score, A, Y)`` and
    product-measure samples redraw ``A`` only within equal-outcome strata
    (``A' ~ A | Y``).  Singleton strata keep their identity pairing and are
    flagged.
    """
    if steps < 1:
        raise InputError("steps must be >= 1")
    scores = _as_score_matrix(scores)
    sensitive = np.asarray(sensitive, dtype=np.float64)
    outcome = np.asarray(outcome, dtype=np.float64).ravel()
    if not (scores.shape[0] == sensitive.shape[0] == outcome.shape[0]):
        raise InputError("scores, sensitive and outcome rows must align")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if np.ptp(scores) < 1e-12:
        warnings.warn("scores are constant; HGR estimate degenerates to 0")
        return HgrEstimate.from_r(0.0, degenerate=True)
    scores = (scores - scores.mean()) / scores.std()
    y_col = outcome[:, None]
    joint_in = np.hstack([scores, sensitive, y_col])
    if critic is None:
        critic = make_critic(joint_in.shape[1], seed=int(rng.integers(2**31)))
    saw_small = False

    def product_in(idx: np.ndarray) -> np.ndarray:
        nonlocal saw_small
        perm, small = _stratified_permutation(outcome[idx], rng)
        saw_small = saw_small or small
        return np.hstack([scores[idx], sensitive[idx][perm], y_col[idx]])

    r = _dual_ascent(critic, joint_in, product_in, steps, rng, lr, batch_size,
                     final_products)
    return HgrEstimate.from_r(r, small_strata=saw_small)
