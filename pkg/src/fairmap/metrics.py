"""Fairness and utility evaluation: AUC, parity/odds gaps, KS statistics,
Pareto hypervolume, consistency scores and theorem-style diagnostics.

All operations are pure functions of their inputs.  Group labels are integer
ids (see :func:`fairmap.data.group_ids`); predicted labels are 0/1 floats.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .hgr import d_metric


class MetricError(ValueError):
    """A metric was asked for an undefined quantity (empty stratum, single
    class, zero denominator)."""


def _binary_check(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if not np.all(np.isin(labels, (0.0, 1.0))):
        raise MetricError("labels must be binary 0/1")
    if labels.min() == labels.max():
        raise MetricError("both classes must be present")
    return labels


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve, Mann-Whitney rank form with half-credit ties.

    Equals the probability that a random positive outranks a random negative,
    counting ties as 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary_check(labels)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels must align")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty_like(scores)
    ranks[order] = np.arange(1, scores.size + 1, dtype=np.float64)
    # average ranks over tied score groups
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    u = ranks[labels == 1.0].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def choose_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold maximizing Youden's J = TPR - FPR for the rule ``score >= t``.

    Ties are broken toward the larger threshold.  With constant scores J is
    zero everywhere and that constant is returned.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary_check(labels)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    best_t, best_j = None, -np.inf
    for t in np.unique(scores):
        pred = scores >= t
        tpr = np.sum(pred & (labels == 1.0)) / n_pos
        fpr = np.sum(pred & (labels == 0.0)) / n_neg
        j = tpr - fpr
        if j > best_j or (j == best_j and (best_t is None or t > best_t)):
            best_j, best_t = j, t
    return float(best_t)


def predict_labels(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Deterministic labels for the rule ``score >= threshold``."""
    return (np.asarray(scores, dtype=np.float64).ravel() >= threshold).astype(np.float64)


def sp_ratio(pred_labels: np.ndarray, sensitive_groups: np.ndarray) -> float:
    """Statistical-parity gap: sum over groups of
    ``|P(Yhat=1 | A=a) / P(Yhat=1) - 1|``."""
    pred = np.asarray(pred_labels, dtype=np.float64).ravel()
    groups = np.asarray(sensitive_groups).ravel()
    if pred.shape != groups.shape:
        raise MetricError("predictions and groups must align")
    overall = pred.mean() if pred.size else 0.0
    if overall == 0.0:
        raise MetricError("P(Yhat=1) = 0; parity ratio undefined")
    total = 0.0
    for g in np.unique(groups):
        rate = pred[groups == g].mean()
        total += abs(rate / overall - 1.0)
    return float(total)


def eo_ratio(pred_labels: np.ndarray, sensitive_groups: np.ndarray,
             true_labels: np.ndarray) -> float:
    """Equalized-odds gap: sum over outcome levels y and groups a of
    ``|P(Yhat=y | A=a, Y=y) / P(Yhat=y | Y=y) - 1|``."""
    pred = np.asarray(pred_labels, dtype=np.float64).ravel()
    groups = np.asarray(sensitive_groups).ravel()
    true = np.asarray(true_labels, dtype=np.float64).ravel()
    if not (pred.shape == groups.shape == true.shape):
        raise MetricError("predictions, groups and labels must align")
    total = 0.0
    for y in np.unique(true):
        stratum = true == y
        pooled = np.mean(pred[stratum] == y)
        if pooled == 0.0:
            raise MetricError(f"P(Yhat={y} | Y={y}) = 0; odds ratio undefined")
        for g in np.unique(groups):
            sub = stratum & (groups == g)
            if not sub.any():
                raise MetricError(f"empty stratum (Y={y}, A={g})")
            total += abs(np.mean(pred[sub] == y) / pooled - 1.0)
    return float(total)


def ks_statistic(sample_a: np.ndarray, sample_b: np.ndarray) -> float:
    """Exact two-sample Kolmogorov-Smirnov statistic via merged sort."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(sample_b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise MetricError("KS statistic needs non-empty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def ks_sp(scores: np.ndarray, sensitive_groups: np.ndarray) -> float:
    """KS-based parity gap: sum over groups of
    ``KS(scores | A=a, pooled scores)``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    groups = np.asarray(sensitive_groups).ravel()
    if scores.shape != groups.shape:
        raise MetricError("scores and groups must align")
    total = 0.0
    for g in np.unique(groups):
        sel = groups == g
        total += ks_statistic(scores[sel], scores)
    return float(total)


def ks_eo(scores: np.ndarray, sensitive_groups: np.ndarray,
          true_labels: np.ndarray) -> float:
    """KS-based odds gap on the flipped scores ``y + (-1)^y * score``.

    For each outcome level y of a binary label, the score is mapped to
    ``y + (-1)^y * score`` (the one-minus score for y = 1), restricted to the
    stratum Y = 1 - y, and the group-conditional KS against the stratum pool
    is summed over groups.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    groups = np.asarray(sensitive_groups).ravel()
    true = _binary_check(true_labels)
    if not (scores.shape == groups.shape == true.shape):
        raise MetricError("scores, groups and labels must align")
    total = 0.0
    for y in (0.0, 1.0):
        mapped = y + ((-1.0) ** y) * scores
        stratum = true == 1.0 - y
        if not stratum.any():
            raise MetricError(f"empty stratum Y={1.0 - y}")
        for g in np.unique(groups):
            sub = stratum & (groups == g)
            if not sub.any():
                raise MetricError(f"empty stratum (Y={1.0 - y}, A={g})")
            total += ks_statistic(mapped[sub], mapped[stratum])
    return float(total)


# ---------------------------------------------------------------------------
# Trade-off points, Pareto front, hypervolume
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TradeoffPoint:
    """A ``(1 - AUC, scaled fairness)`` tuple; both coordinates in [0, 1]."""

    one_minus_auc: float
    scaled_fairness: float
    tag: tuple = ()

    def __post_init__(self) -> None:
        for v in (self.one_minus_auc, self.scaled_fairness):
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"trade-off coordinates must lie in [0, 1], got {v}")

    @property
    def coords(self) -> tuple[float, float]:
        return (self.one_minus_auc, self.scaled_fairness)


def pareto_front(points: list[TradeoffPoint]) -> list[TradeoffPoint]:
    """Non-dominated subset under minimization of both coordinates."""
    front = []
    seen = set()
    for p in points:
        if p.coords in seen:
            continue
        dominated = any(
            q.one_minus_auc <= p.one_minus_auc and q.scaled_fairness <= p.scaled_fairness
            and q.coords != p.coords
            for q in points
        )
        if not dominated:
            front.append(p)
            seen.add(p.coords)
    return sorted(front, key=lambda p: p.coords)


def hypervolume_2d(points: list[TradeoffPoint],
                   reference: tuple[float, float] = (1.0, 1.0)) -> float:
    """Exact area dominated by the non-dominated subset up to ``reference``.

    Computed by the sorted sweep over the Pareto front (union of rectangles).
    Every point must lie inside the reference box.
    """
    if not points:
        return 0.0
    rx, ry = reference
    for p in points:
        if p.one_minus_auc > rx or p.scaled_fairness > ry:
            raise MetricError(f"point {p.coords} exceeds reference {reference}")
    front = pareto_front(points)
    area = 0.0
    for i, p in enumerate(front):
        next_x = front[i + 1].one_minus_auc if i + 1 < len(front) else rx
        area += (next_x - p.one_minus_auc) * (ry - p.scaled_fairness)
    return float(area)


def consistency_scores(per_model_values: np.ndarray) -> float:
    """Sample standard deviation (divisor k - 1) of a metric across the zoo."""
    values = np.asarray(per_model_values, dtype=np.float64).ravel()
    if values.size < 2:
        raise MetricError("consistency needs at least two models")
    return float(np.std(values, ddof=1))


def mean_two_se(values: np.ndarray) -> tuple[float, float]:
    """Mean and twice the standard error of the mean across runs."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise MetricError("aggregation needs at least one value")
    if values.size == 1:
        return float(values[0]), 0.0
    se = np.std(values, ddof=1) / np.sqrt(values.size)
    return float(values.mean()), float(2.0 * se)


def score_group_gap(scores: np.ndarray, sensitive_groups: np.ndarray) -> float:
    """Largest absolute difference of group-mean scores (the regression
    fairness gap; for two groups this is |E[s | A=1] - E[s | A=0]|)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    groups = np.asarray(sensitive_groups).ravel()
    if scores.shape != groups.shape:
        raise MetricError("scores and groups must align")
    means = [scores[groups == g].mean() for g in np.unique(groups)]
    if len(means) < 2:
        raise MetricError("group gap needs at least two groups")
    return float(max(means) - min(means))


# ---------------------------------------------------------------------------
# Reports and theorem diagnostics
# ---------------------------------------------------------------------------


@dataclass
class FairnessReport:
    """Per-model evaluation bundle."""

    auc: float
    sp: float
    eo: float
    ks_sp: float
    ks_eo: float
    hgr_hat: float
    loss: float
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "FairnessReport":
        return cls(**{k: float(doc[k]) for k in
                      ("auc", "sp", "eo", "ks_sp", "ks_eo", "hgr_hat", "loss", "threshold")})


@dataclass
class ImprovementDiagnostics:
    """Measured fairness/utility improvements plus reported theorem bounds.

    The bounds are diagnostics, never hard assertions: the Lipschitz constants
    entering the downstream bracket are not identifiable from data, so the
    bracket reported here keeps only the identifiable core terms.
    """

    delta_f_tilde: float
    delta_f_k_tilde: dict[str, float]
    delta_f_k: dict[str, float]
    delta_l_tilde: float
    delta_l_k: dict[str, float]
    d_up_label: float
    d_k_label: dict[str, float]
    d_up_k: dict[str, float]
    e_a: float
    check_epsilon: float
    theorem1_lhs: float
    theorem1_lower_bound: float
    theorem2: dict[str, dict[str, float]]
    slack: float = 0.15

    def theorem1_satisfied(self, slack: float | None = None) -> bool:
        s = self.slack if slack is None else slack
        return self.theorem1_lhs >= self.theorem1_lower_bound - s

    def to_dict(self) -> dict:
        return asdict(self)


def improvement_diagnostics(*, lambda_f: float,
                            rho_up_orig: float, rho_up_trans: float,
                            rho_k_orig: dict[str, float],
                            rho_k_trans: dict[str, float],
                            loss_up_orig: float, loss_up_trans: float,
                            loss_k_orig: dict[str, float],
                            rho_up_label: float,
                            rho_k_label: dict[str, float],
                            rho_up_k: dict[str, float],
                            check_epsilon: float,
                            loss_up_on_y_trans: float,
                            slack: float = 0.15) -> ImprovementDiagnostics:
    """Assemble the improvement bookkeeping and the reported bounds.

    Arguments are HGR estimates ``rho_*`` (between model scores and the
    sensitive attributes, the transformed label, or each other) and risks
    ``loss_*``; ``check_epsilon`` is the estimated minimal joint risk when
    predicting the outcome from covariates and sensitive attributes together,
    and ``loss_up_on_y_trans`` the risk of the fitted upstream model against
    the original label.  Mismatched per-model keys raise ``MetricError``.
    """
    if set(rho_k_orig) != set(rho_k_trans) or set(rho_k_orig) != set(loss_k_orig):
        raise MetricError("per-model inputs must cover the same model keys")
    e_a = loss_up_orig - check_epsilon
    delta_f_tilde = rho_up_orig - rho_up_trans
    delta_f_k = {k: rho_up_orig - rho_k_orig[k] for k in rho_k_orig}
    delta_f_k_tilde = {k: rho_k_orig[k] - rho_k_trans[k] for k in rho_k_orig}
    delta_l_k = {k: loss_k_orig[k] - loss_up_orig for k in loss_k_orig}
    lower = ((loss_up_on_y_trans - e_a - check_epsilon) / lambda_f
             if lambda_f > 0 else -np.inf)
    theorem2 = {}
    for k in rho_k_orig:
        core = delta_f_tilde - delta_f_k[k]
        width = d_metric(rho_up_k[k]) if k in rho_up_k else float("nan")
        theorem2[k] = {"lhs": delta_f_k_tilde[k],
                       "lower": core - width, "upper": core + width}
    return ImprovementDiagnostics(
        delta_f_tilde=delta_f_tilde,
        delta_f_k_tilde=delta_f_k_tilde,
        delta_f_k=delta_f_k,
        delta_l_tilde=loss_up_orig - loss_up_trans,
        delta_l_k=delta_l_k,
        d_up_label=d_metric(rho_up_label),
        d_k_label={k: d_metric(v) for k, v in rho_k_label.items()},
        d_up_k={k: d_metric(v) for k, v in rho_up_k.items()},
        e_a=e_a,
        check_epsilon=check_epsilon,
        theorem1_lhs=delta_f_tilde,
        theorem1_lower_bound=float(lower),
        theorem2=theorem2,
        slack=slack,
    )
