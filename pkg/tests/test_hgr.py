"""HGR oracle and neural-estimator tests.

The exact SVD oracle anchors every property: the chi-square bound, the
category-merge monotonicity, the triangle inequality with a binary pivot, and
the calibration of the sampled dual estimator.
"""

import numpy as np
import pytest

from fairmap import hgr


def binary_onehot(idx):
    idx = np.asarray(idx, dtype=np.float64)
    return np.stack([1.0 - idx, idx], axis=1)


# -- exact oracle --------------------------------------------------------


def test_product_joint_is_independent():
    joint = hgr.DiscreteJoint(np.outer([0.3, 0.7], [0.2, 0.5, 0.3]))
    assert hgr.hgr_exact_discrete(joint) <= 1e-9


def test_bijection_joint_is_one():
    joint = hgr.DiscreteJoint(np.array([[0.0, 0.5], [0.5, 0.0]]))
    assert abs(hgr.hgr_exact_discrete(joint) - 1.0) <= 1e-12


def test_binary_joint_equals_abs_pearson():
    # for binary pairs the maximal correlation is |Corr|
    joint = hgr.DiscreteJoint(np.array([[0.4, 0.1], [0.1, 0.4]]))
    assert abs(hgr.hgr_exact_discrete(joint) - 0.6) <= 1e-12
    rng = np.random.default_rng(3)
    for _ in range(20):
        j = hgr.random_discrete_joint(2, 2, rng)
        p = j.probs
        p1 = p[1].sum()
        q1 = p[:, 1].sum()
        cov = p[1, 1] - p1 * q1
        corr = cov / np.sqrt(p1 * (1 - p1) * q1 * (1 - q1))
        assert abs(hgr.hgr_exact_discrete(j) - abs(corr)) <= 1e-9


def test_joint_validation_errors():
    with pytest.raises(hgr.InputError):
        hgr.DiscreteJoint(np.array([[0.5, 0.5], [0.5, -0.5]]))
    with pytest.raises(hgr.InputError):
        hgr.DiscreteJoint(np.array([[0.5, 0.4]]))  # does not sum to 1
    with pytest.raises(hgr.InputError):
        hgr.DiscreteJoint(np.array([[0.5, 0.5], [0.0, 0.0]]))  # empty category


def test_chi2_dual_objective_arithmetic():
    assert hgr.chi2_dual_objective(np.zeros(5), np.zeros(7)) == 0.0
    assert hgr.chi2_dual_objective(np.array([2.0]), np.array([2.0])) == -1.0
    with pytest.raises(hgr.InputError):
        hgr.chi2_dual_objective(np.array([]), np.array([1.0]))


def test_dual_never_exceeds_chi2_exact():
    rng = np.random.default_rng(11)
    for _ in range(100):
        k1, k2 = rng.integers(2, 6, size=2)
        joint = hgr.random_discrete_joint(int(k1), int(k2), rng)
        critic = rng.normal(scale=3.0, size=joint.probs.shape)
        assert hgr.chi2_dual_exact(joint, critic) <= hgr.chi2_divergence(joint) + 1e-10
    # the optimal critic 2 (dP/dQ - 1) attains the divergence exactly
    joint = hgr.random_discrete_joint(3, 4, rng)
    prod = np.outer(joint.row_marginal, joint.col_marginal)
    v_opt = 2.0 * (joint.probs / prod - 1.0)
    assert abs(hgr.chi2_dual_exact(joint, v_opt) - hgr.chi2_divergence(joint)) <= 1e-12


def test_rho_squared_bounded_by_chi2():
    rng = np.random.default_rng(7)
    for _ in range(100):
        k1, k2 = rng.integers(2, 6, size=2)
        joint = hgr.random_discrete_joint(int(k1), int(k2), rng)
        rho = hgr.hgr_exact_discrete(joint)
        assert rho ** 2 <= hgr.chi2_divergence(joint) + 1e-10


def test_rho_squared_equals_chi2_for_binary_pairs():
    rng = np.random.default_rng(8)
    for _ in range(100):
        joint = hgr.random_discrete_joint(2, 2, rng)
        assert abs(hgr.hgr_exact_discrete(joint) ** 2
                   - hgr.chi2_divergence(joint)) <= 1e-9


def test_category_merge_never_increases_hgr():
    rng = np.random.default_rng(9)
    for _ in range(100):
        k1 = int(rng.integers(3, 6))
        k2 = int(rng.integers(2, 6))
        joint = hgr.random_discrete_joint(k1, k2, rng)
        i, j = rng.choice(k1, size=2, replace=False)
        merged = hgr.merge_categories(joint, int(i), int(j))
        assert hgr.hgr_exact_discrete(merged) <= hgr.hgr_exact_discrete(joint) + 1e-10


def test_triangle_inequality_binary_pivot():
    rng = np.random.default_rng(10)
    for _ in range(100):
        k1 = int(rng.integers(2, 5))
        k2 = int(rng.integers(2, 5))
        cube = rng.gamma(1.0, size=(k1, k2, 2)) + 1e-6
        cube /= cube.sum()
        j12 = hgr.DiscreteJoint(cube.sum(axis=2))
        j13 = hgr.DiscreteJoint(cube.sum(axis=1))
        j23 = hgr.DiscreteJoint(cube.sum(axis=0))
        d12 = hgr.d_metric(hgr.hgr_exact_discrete(j12))
        d13 = hgr.d_metric(hgr.hgr_exact_discrete(j13))
        d23 = hgr.d_metric(hgr.hgr_exact_discrete(j23))
        assert d12 <= d13 + d23 + 1e-9


def test_merge_categories_validation():
    joint = hgr.random_discrete_joint(3, 3, np.random.default_rng(0))
    with pytest.raises(hgr.InputError):
        hgr.merge_categories(joint, 1, 1)


# -- d metric ------------------------------------------------------------


def test_d_metric_values():
    assert hgr.d_metric(1.0) == 0.0
    assert abs(hgr.d_metric(0.0) - np.sqrt(2.0)) <= 1e-12
    assert abs(hgr.d_metric(0.5) - 1.0) <= 1e-12


def test_d_metric_domain():
    with pytest.raises(hgr.InputError):
        hgr.d_metric(1.2)
    with pytest.raises(hgr.InputError):
        hgr.d_metric(-0.1)


# -- neural estimator: independence ---------------------------------------


def test_independence_estimate_near_zero():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=5000)
    a = binary_onehot(rng.binomial(1, 0.5, 5000))
    est = hgr.estimate_hgr_independence(scores, a, steps=250, rng=np.random.default_rng(1))
    assert est.rho_hat <= 0.1
    assert not est.degenerate


def test_functional_dependence_estimate_near_one():
    rng = np.random.default_rng(2)
    idx = rng.binomial(1, 0.5, 5000)
    scores = 3.0 * idx - 1.0  # deterministic monotone function of A
    est = hgr.estimate_hgr_independence(scores, binary_onehot(idx), steps=250,
                                        rng=np.random.default_rng(3))
    assert est.rho_hat >= 0.9


def test_binary_joint_estimate_matches_oracle_band():
    joint = hgr.DiscreteJoint(np.array([[0.4, 0.1], [0.1, 0.4]]))  # oracle 0.6
    i_idx, j_idx = joint.sample(5000, np.random.default_rng(4))
    est = hgr.estimate_hgr_independence(i_idx.astype(float), binary_onehot(j_idx),
                                        steps=300, rng=np.random.default_rng(5))
    assert 0.5 <= est.rho_hat <= 0.7


def test_degenerate_scores_flagged():
    a = binary_onehot(np.random.default_rng(0).binomial(1, 0.5, 100))
    with pytest.warns(UserWarning):
        est = hgr.estimate_hgr_independence(np.ones(100), a, steps=5)
    assert est.degenerate and est.rho_hat == 0.0


def test_estimator_input_validation():
    with pytest.raises(hgr.InputError):
        hgr.estimate_hgr_independence(np.ones(10), np.zeros((5, 2)), steps=5)
    with pytest.raises(hgr.InputError):
        hgr.estimate_hgr_independence(np.ones(10), np.zeros((10, 2)), steps=0)


# -- neural estimator: separation ------------------------------------------


def test_separation_conditionally_independent_scores():
    rng = np.random.default_rng(6)
    n = 5000
    y = rng.binomial(1, 0.5, n).astype(float)
    a = binary_onehot(rng.binomial(1, 0.3 + 0.4 * y))  # A depends on Y
    scores = y + rng.normal(0, 0.5, n)  # depends on Y only
    est = hgr.estimate_hgr_separation(scores, a, y, steps=250,
                                      rng=np.random.default_rng(7))
    assert est.rho_hat <= 0.1


def test_separation_reduces_to_independence_when_y_independent():
    rng = np.random.default_rng(8)
    n = 5000
    idx = rng.binomial(1, 0.5, n)
    y = rng.binomial(1, 0.5, n).astype(float)  # independent of A and scores
    scores = 2.0 * idx + rng.normal(0, 0.3, n)
    est_sep = hgr.estimate_hgr_separation(scores, binary_onehot(idx), y, steps=250,
                                          rng=np.random.default_rng(9))
    est_ind = hgr.estimate_hgr_independence(scores, binary_onehot(idx), steps=250,
                                            rng=np.random.default_rng(10))
    assert abs(est_sep.rho_hat - est_ind.rho_hat) <= 0.1


def test_confounded_outcome_separates_the_notions():
    # Y = A: permuting A within Y strata leaves the joint unchanged, so the
    # separation value collapses while the marginal dependence stays maximal
    rng = np.random.default_rng(11)
    n = 5000
    y = rng.binomial(1, 0.5, n).astype(float)
    a = binary_onehot(y)
    scores = 2.0 * y + rng.normal(0, 0.05, n)
    est_sep = hgr.estimate_hgr_separation(scores, a, y, steps=250,
                                          rng=np.random.default_rng(12))
    est_ind = hgr.estimate_hgr_independence(scores, a, steps=250,
                                            rng=np.random.default_rng(13))
    assert est_sep.rho_hat <= 0.15
    assert est_ind.rho_hat >= 0.6


def test_singleton_stratum_flagged():
    rng = np.random.default_rng(14)
    n = 64
    y = np.zeros(n)
    y[0] = 1.0  # singleton stratum
    a = binary_onehot(rng.binomial(1, 0.5, n))
    scores = rng.normal(size=n)
    est = hgr.estimate_hgr_separation(scores, a, y, steps=5,
                                      rng=np.random.default_rng(15))
    assert est.small_strata


def test_estimate_rho_from_r_clamps():
    assert hgr.HgrEstimate.from_r(-0.5).rho_hat == 0.0
    assert hgr.HgrEstimate.from_r(4.0).rho_hat == 1.0
    assert abs(hgr.HgrEstimate.from_r(0.36).rho_hat - 0.6) <= 1e-12
