"""Constrained min-max bilevel training of the pre-processing map.

Per mini-batch iteration the trainer (a) refits the upstream predictor on the
currently transformed batch and ascends the dependence critic, (b) performs
dual ascent on the per-variable distortion multipliers, then (c) descends the
covariate converter on ``prediction loss + lambda_f * critic value +
multiplier-weighted budget overshoots`` and the label converter on its own
constrained loss.  All randomness flows from the config seed; identical
configs reproduce identical traces bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, VarBlock
from .hgr import f_star, make_critic
from .nn import (Adam, DenseNet, NumericError, gumbel_softmax,
                 gumbel_softmax_backward)

PROB_CLIP = 1e-7
FAIRNESS_NOTIONS = ("independence", "separation")
LOSS_KINDS = ("auto", "cross_entropy", "squared_error")
CONSTRAINT_KINDS = ("mae", "categorical_hinge")


class ConfigError(ValueError):
    """An invalid hyperparameter; the message names the offending field."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class PreprocessorConfig:
    """All hyperparameters of the bilevel trainer."""

    delta_x: float | Sequence[float] = 0.1
    delta_y: float = 0.0
    lambda_f: float = 1.0
    fairness_notion: str = "independence"
    epochs: int = 150
    batch_size: int = 200
    t_prime: int = 1
    lr_h: float = 3e-3
    lr_v: float = 5e-3
    lr_g: float = 3e-3
    dual_rate_x: float = 0.05
    dual_rate_y: float = 0.05
    seed: int = 0
    loss: str = "auto"
    hidden: int = 64
    depth: int = 3
    dropout: float = 0.1
    temperature: float = 0.5
    logit_scale: float = 2.0

    def validate(self) -> None:
        deltas = np.atleast_1d(np.asarray(self.delta_x, dtype=np.float64))
        if np.any(deltas < 0):
            raise ConfigError("delta_x must be >= 0")
        for name in ("delta_y", "lambda_f", "lr_h", "lr_v", "lr_g",
                     "dual_rate_x", "dual_rate_y"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.fairness_notion not in FAIRNESS_NOTIONS:
            raise ConfigError(f"fairness_notion must be one of {FAIRNESS_NOTIONS}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")
        if self.t_prime < 1:
            raise ConfigError("t_prime must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")

    def budgets(self, n_vars: int) -> np.ndarray:
        deltas = np.atleast_1d(np.asarray(self.delta_x, dtype=np.float64))
        if deltas.size == 1:
            return np.full(n_vars, float(deltas[0]))
        if deltas.size != n_vars:
            raise ConfigError(
                f"delta_x has {deltas.size} entries for {n_vars} covariates")
        return deltas.astype(np.float64)

    def to_dict(self) -> dict:
        doc = asdict(self)
        if isinstance(doc["delta_x"], np.ndarray):
            doc["delta_x"] = doc["delta_x"].tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessorConfig":
        return cls(**doc)


# ---------------------------------------------------------------------------
# Distortion constraints
# ---------------------------------------------------------------------------


def constraint_loss(kind: str, original: np.ndarray, transformed: np.ndarray) -> float:
    """Per-variable distortion: mean absolute error for continuous columns,
    categorical hinge (transformed scores against the original one-hot) for
    one-hot blocks."""
    original = np.asarray(original, dtype=np.float64)
    transformed = np.asarray(transformed, dtype=np.float64)
    if original.shape != transformed.shape:
        raise ValueError(f"shape mismatch {original.shape} vs {transformed.shape}")
    if kind == "mae":
        return float(np.mean(np.abs(original - transformed)))
    if kind == "categorical_hinge":
        if original.ndim != 2 or original.shape[1] < 2:
            raise ValueError("categorical hinge needs a one-hot block")
        s_true = np.sum(original * transformed, axis=1)
        masked = np.where(original > 0, -np.inf, transformed)
        s_other = masked.max(axis=1)
        return float(np.mean(np.maximum(0.0, 1.0 - (s_true - s_other))))
    raise ValueError(f"unknown constraint kind {kind!r}")


def _constraint_grad(kind: str, original: np.ndarray, transformed: np.ndarray) -> np.ndarray:
    """Subgradient of :func:`constraint_loss` w.r.t. the transformed values."""
    n = original.shape[0]
    if kind == "mae":
        return np.sign(transformed - original) / original.size
    s_true = np.sum(original * transformed, axis=1)
    masked = np.where(original > 0, -np.inf, transformed)
    other_idx = masked.argmax(axis=1)
    active = ((1.0 - (s_true - masked.max(axis=1))) > 0.0).astype(np.float64)
    grad = np.zeros_like(transformed)
    rows = np.arange(n)
    grad[rows, original.argmax(axis=1)] = -active / n
    grad[rows, other_idx] += active / n
    return grad


@dataclass(frozen=True)
class ConstraintSpec:
    """Distance kind per covariate block plus the outcome distance kind."""

    kinds: tuple[str, ...]
    y_kind: str

    @classmethod
    def from_blocks(cls, blocks: Sequence[VarBlock], task: str) -> "ConstraintSpec":
        kinds = tuple("mae" if b.kind == "continuous" else "categorical_hinge"
                      for b in blocks)
        return cls(kinds, "categorical_hinge" if task == "classification" else "mae")

    def per_variable(self, blocks: Sequence[VarBlock], x: np.ndarray,
                     x_bar: np.ndarray) -> np.ndarray:
        return np.array([
            constraint_loss(k, x[:, b.start:b.stop], x_bar[:, b.start:b.stop])
            for k, b in zip(self.kinds, blocks)
        ])


# ---------------------------------------------------------------------------
# Converter networks
# ---------------------------------------------------------------------------


class ConverterX:
    """Shared trunk with one head per covariate: affine residual heads for
    continuous variables, Gumbel-softmax heads (logits biased toward the
    original category) for one-hot blocks.  Consumes (X, A), never Y."""

    def __init__(self, blocks: Sequence[VarBlock], a_dim: int, *, hidden: int = 64,
                 depth: int = 3, dropout: float = 0.1, temperature: float = 0.5,
                 logit_scale: float = 2.0, seed: int = 0):
        self.blocks = list(blocks)
        self.a_dim = a_dim
        self.x_dim = self.blocks[-1].stop
        self.temperature = temperature
        self.logit_scale = logit_scale
        self.seed = seed
        self.trunk = DenseNet([self.x_dim + a_dim] + [hidden] * depth,
                              ["relu"] * depth, dropout=dropout, seed=seed)
        self.heads = [DenseNet([hidden, b.width], ["identity"], seed=seed + 101 + i)
                      for i, b in enumerate(self.blocks)]
        self.rng = np.random.default_rng(seed + 7)
        self._cache: dict | None = None

    def forward(self, x: np.ndarray, a: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if x.shape[1] != self.x_dim or a.shape[1] != self.a_dim:
            raise ValueError(
                f"expected x (n, {self.x_dim}) and a (n, {self.a_dim}), got "
                f"{x.shape} and {a.shape}")
        trunk_out = self.trunk.forward(np.hstack([x, a]), training=training)
        out = np.empty_like(x)
        soft_cache: dict[int, np.ndarray] = {}
        for i, (blk, head) in enumerate(zip(self.blocks, self.heads)):
            raw = head.forward(trunk_out, training=training)
            block_in = x[:, blk.start:blk.stop]
            if blk.kind == "continuous":
                out[:, blk.start:blk.stop] = block_in + raw
            else:
                logits = raw + self.logit_scale * block_in
                if training:
                    soft = gumbel_softmax(logits, self.temperature, hard=False,
                                          rng=self.rng)
                    soft_cache[i] = soft
                    out[:, blk.start:blk.stop] = soft
                else:
                    hard = np.zeros_like(logits)
                    hard[np.arange(logits.shape[0]), logits.argmax(axis=1)] = 1.0
                    out[:, blk.start:blk.stop] = hard
        self._cache = {"soft": soft_cache} if training else None
        return out

    def backward(self, grad_out: np.ndarray,
                 logit_grads: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Backprop a gradient on the transformed batch into all parameters.

        ``logit_grads`` carries straight-through gradients applied directly to
        a categorical head's logits (by block index).  The budget-constraint
        pull-back uses this path: once logits run deep into the softmax's
        saturated region the soft-sample Jacobian vanishes, and the dual
        multipliers could no longer recover an over-distorted block.
        """
        if self._cache is None:
            raise RuntimeError("backward requires a training-mode forward")
        grads: list[np.ndarray] = []
        trunk_grad = None
        head_grads = []
        for i, (blk, head) in enumerate(zip(self.blocks, self.heads)):
            g = grad_out[:, blk.start:blk.stop]
            if blk.kind == "categorical":
                g = gumbel_softmax_backward(self._cache["soft"][i], g, self.temperature)
            if logit_grads and i in logit_grads:
                g = g + logit_grads[i]
            head_grads.append(head.backward(g))
            trunk_grad = head.input_grad if trunk_grad is None else trunk_grad + head.input_grad
        grads.extend(self.trunk.backward(trunk_grad))
        for hg in head_grads:
            grads.extend(hg)
        return grads

    def parameters(self) -> list[np.ndarray]:
        params = list(self.trunk.parameters())
        for head in self.heads:
            params.extend(head.parameters())
        return params

    def to_dict(self) -> dict:
        return {
            "blocks": [{"name": b.name, "kind": b.kind, "start": b.start, "stop": b.stop}
                       for b in self.blocks],
            "a_dim": self.a_dim,
            "temperature": self.temperature,
            "logit_scale": self.logit_scale,
            "seed": self.seed,
            "trunk": self.trunk.to_dict(),
            "heads": [h.to_dict() for h in self.heads],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConverterX":
        blocks = [VarBlock(b["name"], b["kind"], b["start"], b["stop"])
                  for b in doc["blocks"]]
        trunk = DenseNet.from_dict(doc["trunk"])
        conv = cls(blocks, doc["a_dim"], hidden=trunk.dims[-1],
                   depth=len(trunk.dims) - 1, dropout=trunk.dropout,
                   temperature=doc["temperature"], logit_scale=doc["logit_scale"],
                   seed=doc["seed"])
        conv.trunk = trunk
        conv.heads = [DenseNet.from_dict(h) for h in doc["heads"]]
        return conv


class ConverterY:
    """Label converter on (X, A, Y): residual affine head for a continuous
    outcome, Gumbel-softmax head biased toward the original class otherwise."""

    def __init__(self, x_dim: int, a_dim: int, y_kind: str, *, n_classes: int = 2,
                 hidden: int = 64, depth: int = 3, dropout: float = 0.1,
                 temperature: float = 0.5, logit_scale: float = 2.0, seed: int = 0):
        self.x_dim = x_dim
        self.a_dim = a_dim
        self.y_kind = y_kind
        self.n_classes = n_classes
        self.temperature = temperature
        self.logit_scale = logit_scale
        self.seed = seed
        y_width = 1 if y_kind == "continuous" else n_classes
        self.y_width = y_width
        self.trunk = DenseNet([x_dim + a_dim + y_width] + [hidden] * depth,
                              ["relu"] * depth, dropout=dropout, seed=seed)
        self.head = DenseNet([hidden, y_width], ["identity"], seed=seed + 211)
        self.rng = np.random.default_rng(seed + 13)
        self._cache: dict | None = None

    def encode_y(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64).ravel()
        if self.y_kind == "continuous":
            return y[:, None]
        onehot = np.zeros((y.size, self.n_classes))
        onehot[np.arange(y.size), y.astype(int)] = 1.0
        return onehot

    def forward(self, x: np.ndarray, a: np.ndarray, y: np.ndarray,
                training: bool = False) -> np.ndarray:
        y_enc = self.encode_y(y)
        trunk_out = self.trunk.forward(np.hstack([x, a, y_enc]), training=training)
        raw = self.head.forward(trunk_out, training=training)
        if self.y_kind == "continuous":
            self._cache = {} if training else None
            return y_enc + raw
        logits = raw + self.logit_scale * y_enc
        if training:
            soft = gumbel_softmax(logits, self.temperature, hard=False, rng=self.rng)
            self._cache = {"soft": soft}
            return soft
        hard = np.zeros_like(logits)
        hard[np.arange(logits.shape[0]), logits.argmax(axis=1)] = 1.0
        self._cache = None
        return hard

    def backward(self, grad_out: np.ndarray,
                 logit_grad: np.ndarray | None = None) -> list[np.ndarray]:
        """Backprop into all parameters; ``logit_grad`` is the straight-through
        path for the budget pull-back (see :meth:`ConverterX.backward`)."""
        if self._cache is None:
            raise RuntimeError("backward requires a training-mode forward")
        g = grad_out
        if self.y_kind != "continuous":
            g = gumbel_softmax_backward(self._cache["soft"], g, self.temperature)
        if logit_grad is not None:
            g = g + logit_grad
        head_grads = self.head.backward(g)
        grads = list(self.trunk.backward(self.head.input_grad))
        grads.extend(head_grads)
        return grads

    def parameters(self) -> list[np.ndarray]:
        return list(self.trunk.parameters()) + list(self.head.parameters())

    def to_dict(self) -> dict:
        return {
            "x_dim": self.x_dim, "a_dim": self.a_dim, "y_kind": self.y_kind,
            "n_classes": self.n_classes, "temperature": self.temperature,
            "logit_scale": self.logit_scale, "seed": self.seed,
            "trunk": self.trunk.to_dict(), "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConverterY":
        trunk = DenseNet.from_dict(doc["trunk"])
        conv = cls(doc["x_dim"], doc["a_dim"], doc["y_kind"],
                   n_classes=doc["n_classes"], hidden=trunk.dims[-1],
                   depth=len(trunk.dims) - 1, dropout=trunk.dropout,
                   temperature=doc["temperature"], logit_scale=doc["logit_scale"],
                   seed=doc["seed"])
        conv.trunk = trunk
        conv.head = DenseNet.from_dict(doc["head"])
        return conv


# ---------------------------------------------------------------------------
# Prediction losses
# ---------------------------------------------------------------------------


def _loss_value(kind: str, target: np.ndarray, pred: np.ndarray) -> float:
    if kind == "cross_entropy":
        p = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
        return float(-np.sum(target * np.log(p)) / pred.shape[0])
    return float(np.mean(np.square(target - pred)))


def _loss_grad_pred(kind: str, target: np.ndarray, pred: np.ndarray) -> np.ndarray:
    if kind == "cross_entropy":
        p = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
        return -target / p / pred.shape[0]
    return 2.0 * (pred - target) / target.size


def _loss_grad_target(kind: str, target: np.ndarray, pred: np.ndarray) -> np.ndarray:
    if kind == "cross_entropy":
        p = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
        return -np.log(p) / pred.shape[0]
    return 2.0 * (target - pred) / target.size


# ---------------------------------------------------------------------------
# Trained artifact
# ---------------------------------------------------------------------------


@dataclass
class TrainedPreprocessor:
    """The fitted converters plus the upstream model, critic and traces."""

    g_x: ConverterX
    g_y: ConverterY | None
    h_up: DenseNet
    critic: DenseNet
    config: PreprocessorConfig
    blocks: list[VarBlock]
    constraints: ConstraintSpec
    task: str
    multiplier_trace: dict = field(default_factory=dict)
    constraint_trace: dict = field(default_factory=dict)
    loss_trace: list = field(default_factory=list)
    final_train_transform: np.ndarray | None = None

    def assert_wiring(self) -> None:
        """Structural fairness invariants: h never sees A, G_X never sees Y."""
        x_dim = self.blocks[-1].stop
        if self.h_up.in_dim != x_dim:
            raise AssertionError("upstream model input must be the covariates only")
        if self.g_x.trunk.in_dim != x_dim + self.g_x.a_dim:
            raise AssertionError("covariate converter must consume (X, A) only")

    def transform_covariates(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Deterministic inference-mode transform; one-hot blocks come out hard."""
        return self.g_x.forward(x, a, training=False)

    def transform_outcome(self, x: np.ndarray, a: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Transformed labels; the identity when no label budget was configured."""
        y = np.asarray(y, dtype=np.float64).ravel()
        if self.g_y is None:
            return y.copy()
        out = self.g_y.forward(x, a, y, training=False)
        if self.g_y.y_kind == "continuous":
            return out[:, 0]
        return out.argmax(axis=1).astype(np.float64)

    def upstream_scores(self, x_tilde: np.ndarray) -> np.ndarray:
        """Scores of the jointly trained upstream model on transformed covariates."""
        out = self.h_up.forward(x_tilde, training=False)
        return out[:, 1] if self.task == "classification" else out[:, 0]

    # -- bundle io ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "g_x.json").write_text(json.dumps(self.g_x.to_dict(), sort_keys=True))
        if self.g_y is not None:
            (directory / "g_y.json").write_text(json.dumps(self.g_y.to_dict(), sort_keys=True))
        (directory / "h_up.json").write_text(json.dumps(self.h_up.to_dict(), sort_keys=True))
        (directory / "critic.json").write_text(json.dumps(self.critic.to_dict(), sort_keys=True))
        from . import __version__
        meta = {
            "version": __version__,
            "config": self.config.to_dict(),
            "task": self.task,
            "constraints": {"kinds": list(self.constraints.kinds),
                            "y_kind": self.constraints.y_kind},
            "blocks": [{"name": b.name, "kind": b.kind, "start": b.start,
                        "stop": b.stop} for b in self.blocks],
        }
        (directory / "config.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
        traces = {
            "multiplier_trace": {k: np.asarray(v).tolist()
                                 for k, v in self.multiplier_trace.items()},
            "constraint_trace": {k: np.asarray(v).tolist()
                                 for k, v in self.constraint_trace.items()},
            "loss_trace": list(map(float, self.loss_trace)),
        }
        (directory / "traces.json").write_text(json.dumps(traces, sort_keys=True, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "TrainedPreprocessor":
        directory = Path(directory)
        meta = json.loads((directory / "config.json").read_text())
        blocks = [VarBlock(b["name"], b["kind"], b["start"], b["stop"])
                  for b in meta["blocks"]]
        g_y_path = directory / "g_y.json"
        traces = json.loads((directory / "traces.json").read_text())
        pp = cls(
            g_x=ConverterX.from_dict(json.loads((directory / "g_x.json").read_text())),
            g_y=(ConverterY.from_dict(json.loads(g_y_path.read_text()))
                 if g_y_path.exists() else None),
            h_up=DenseNet.from_dict(json.loads((directory / "h_up.json").read_text())),
            critic=DenseNet.from_dict(json.loads((directory / "critic.json").read_text())),
            config=PreprocessorConfig.from_dict(meta["config"]),
            blocks=blocks,
            constraints=ConstraintSpec(tuple(meta["constraints"]["kinds"]),
                                       meta["constraints"]["y_kind"]),
            task=meta["task"],
            multiplier_trace={k: np.asarray(v) for k, v in traces["multiplier_trace"].items()},
            constraint_trace={k: np.asarray(v) for k, v in traces["constraint_trace"].items()},
            loss_trace=traces["loss_trace"],
        )
        pp.assert_wiring()
        return pp


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def dual_ascent_step(multiplier, rate: float, measured, budget):
    """One multiplier update: ``lambda + rate * max(measured - budget, 0)``."""
    return multiplier + rate * np.maximum(np.asarray(measured) - np.asarray(budget), 0.0)


def _stratified_perm(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    perm = np.arange(y.size)
    for level in np.unique(y):
        idx = np.flatnonzero(y == level)
        if idx.size > 1:
            perm[idx] = idx[rng.permutation(idx.size)]
    return perm


def _critic_pass(critic: DenseNet, scores: np.ndarray, a: np.ndarray,
                 y: np.ndarray | None, rng: np.random.Generator
                 ) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """One sampled dual evaluation.

    Returns the dual value, its gradient w.r.t. the scores, and the parameter
    gradients (for ascent, negate them).  Product-measure pairs permute the
    sensitive rows uniformly, or within outcome strata for separation.
    """
    n = scores.shape[0]
    if y is None:
        perm = rng.permutation(n)
        joint = np.hstack([scores, a])
        prod = np.hstack([scores, a[perm]])
    else:
        perm = _stratified_perm(y, rng)
        y_col = y[:, None]
        joint = np.hstack([scores, a, y_col])
        prod = np.hstack([scores, a[perm], y_col])
    v_j = critic.forward(joint, training=True)
    g_j = critic.backward(np.full_like(v_j, 1.0 / n))
    s_grad = critic.input_grad[:, :1].copy()
    v_p = critic.forward(prod, training=True)
    g_p = critic.backward(-(v_p / 2.0 + 1.0) / n)
    s_grad += critic.input_grad[:, :1]
    r = float(np.mean(v_j) - np.mean(f_star(v_p)))
    return r, s_grad, [gj + gp for gj, gp in zip(g_j, g_p)]


def make_upstream(x_dim: int, task: str, *, hidden: int = 64, depth: int = 3,
                  dropout: float = 0.1, seed: int = 0) -> DenseNet:
    """Upstream predictor on covariates only: softmax pair for classification,
    scalar head for regression."""
    out = 2 if task == "classification" else 1
    acts = ["relu"] * depth + (["softmax"] if task == "classification" else ["identity"])
    return DenseNet([x_dim] + [hidden] * depth + [out], acts, dropout=dropout, seed=seed)


def train(dataset: Dataset, config: PreprocessorConfig) -> TrainedPreprocessor:
    """Run the bilevel min-max training loop on a dataset.

    Follows the per-iteration listing: T' inner steps of upstream descent and
    critic ascent on the transformed batch, dual ascent of the distortion
    multipliers ``lambda += rate * max(delta - budget, 0)``, then one descent
    step each for the covariate and label converters evaluated at the updated
    upstream model, critic and multipliers.  A zero label budget fixes the
    label converter to the identity.
    """
    config.validate()
    schema = dataset.schema
    task = schema.task
    blocks = schema.covariate_blocks()
    spec = ConstraintSpec.from_blocks(blocks, task)
    budgets = config.budgets(len(blocks))
    loss_kind = config.loss
    if loss_kind == "auto":
        loss_kind = "cross_entropy" if task == "classification" else "squared_error"
    if loss_kind == "cross_entropy" and task != "classification":
        raise ConfigError("loss=cross_entropy requires a categorical outcome")

    rng = np.random.default_rng(config.seed)
    base = config.seed
    g_x = ConverterX(blocks, schema.a_dim, hidden=config.hidden, depth=config.depth,
                     dropout=config.dropout, temperature=config.temperature,
                     logit_scale=config.logit_scale, seed=base + 1)
    g_y = None
    if config.delta_y > 0:
        g_y = ConverterY(schema.x_dim, schema.a_dim,
                         "categorical" if task == "classification" else "continuous",
                         hidden=config.hidden, depth=config.depth,
                         dropout=config.dropout, temperature=config.temperature,
                         logit_scale=config.logit_scale, seed=base + 2)
    h_up = make_upstream(schema.x_dim, task, hidden=config.hidden, depth=config.depth,
                         dropout=config.dropout, seed=base + 3)
    critic_dim = 1 + schema.a_dim + (1 if config.fairness_notion == "separation" else 0)
    critic = make_critic(critic_dim, seed=base + 4)

    opt_h = Adam(lr=config.lr_h)
    opt_v = Adam(lr=config.lr_v)
    opt_gx = Adam(lr=config.lr_g)
    opt_gy = Adam(lr=config.lr_g) if g_y is not None else None

    lambda_x = np.zeros(len(blocks))
    lambda_y = 0.0
    n = dataset.n
    x_all, a_all, y_all = dataset.x, dataset.a, dataset.y
    y_target_all = None
    if task == "classification":
        y_target_all = np.zeros((n, 2))
        y_target_all[np.arange(n), y_all.astype(int)] = 1.0

    mult_trace_x, mult_trace_y = [], []
    con_trace_x, con_trace_y, loss_trace = [], [], []

    def snapshot(epoch: int, batch: int, extra: dict) -> dict:
        return {"epoch": epoch, "batch": batch, "lambda_x": lambda_x.tolist(),
                "lambda_y": lambda_y, **extra}

    def run_batch(epoch: int, b_start: int, idx: np.ndarray) -> tuple:
        nonlocal lambda_x, lambda_y
        xb, ab, yb = x_all[idx], a_all[idx], y_all[idx]
        y_strata = yb if config.fairness_notion == "separation" else None

        x_bar = y_bar = None
        for _ in range(config.t_prime):
            x_bar = g_x.forward(xb, ab, training=True)
            if g_y is not None:
                y_bar = g_y.forward(xb, ab, yb, training=True)
            else:
                y_bar = y_target_all[idx] if task == "classification" else yb[:, None]
            # upstream descent on the transformed batch
            pred = h_up.forward(x_bar, training=True)
            l_val = _loss_value(loss_kind, y_bar, pred)
            if not np.isfinite(l_val):
                raise TrainingDiverged("non-finite upstream loss",
                                       snapshot(epoch, b_start, {"loss": l_val}))
            opt_h.step(h_up.parameters(),
                       h_up.backward(_loss_grad_pred(loss_kind, y_bar, pred)))
            # critic ascent at the updated upstream model
            pred_eval = h_up.forward(x_bar, training=False)
            scores = pred_eval[:, 1:2] if task == "classification" else pred_eval
            r_val, _, v_grads = _critic_pass(critic, scores, ab, y_strata, rng)
            if not np.isfinite(r_val):
                raise TrainingDiverged("non-finite critic value",
                                       snapshot(epoch, b_start, {"r_value": r_val}))
            opt_v.step(critic.parameters(), [-g for g in v_grads])

        # dual ascent on the batch constraints (last inner iterate)
        d_x = spec.per_variable(blocks, xb, x_bar)
        if g_y is not None:
            if task == "classification":
                d_y = constraint_loss("categorical_hinge", y_target_all[idx], y_bar)
            else:
                d_y = constraint_loss("mae", yb[:, None], y_bar)
        else:
            d_y = 0.0
        lambda_x = dual_ascent_step(lambda_x, config.dual_rate_x, d_x, budgets)
        lambda_y = float(dual_ascent_step(lambda_y, config.dual_rate_y, d_y,
                                          config.delta_y))

        # converter updates at (h, V, lambda) of this iteration
        x_bar = g_x.forward(xb, ab, training=True)
        if g_y is not None:
            y_bar = g_y.forward(xb, ab, yb, training=True)
        pred = h_up.forward(x_bar, training=False)
        grad_pred = _loss_grad_pred(loss_kind, y_bar, pred)
        if config.lambda_f > 0:
            scores = pred[:, 1:2] if task == "classification" else pred
            _, s_grad, _ = _critic_pass(critic, scores, ab, y_strata, rng)
            if task == "classification":
                grad_pred = grad_pred.copy()
                grad_pred[:, 1:2] += config.lambda_f * s_grad
            else:
                grad_pred = grad_pred + config.lambda_f * s_grad
        h_up.backward(grad_pred)
        grad_xbar = h_up.input_grad.copy()
        logit_grads: dict[int, np.ndarray] = {}
        for j, (blk, kind) in enumerate(zip(blocks, spec.kinds)):
            if lambda_x[j] > 0 and d_x[j] > budgets[j]:
                g_con = lambda_x[j] * _constraint_grad(
                    kind, xb[:, blk.start:blk.stop], x_bar[:, blk.start:blk.stop])
                if kind == "categorical_hinge":
                    logit_grads[j] = g_con  # straight-through to the logits
                else:
                    grad_xbar[:, blk.start:blk.stop] += g_con
        gx_grads = g_x.backward(grad_xbar, logit_grads or None)
        gy_grads = None
        if g_y is not None:
            grad_ybar = _loss_grad_target(loss_kind, y_bar, pred)
            y_logit_grad = None
            if lambda_y > 0 and d_y > config.delta_y:
                if task == "classification":
                    y_logit_grad = lambda_y * _constraint_grad(
                        "categorical_hinge", y_target_all[idx], y_bar)
                else:
                    grad_ybar = grad_ybar + lambda_y * _constraint_grad(
                        "mae", yb[:, None], y_bar)
            gy_grads = g_y.backward(grad_ybar, y_logit_grad)
        opt_gx.step(g_x.parameters(), gx_grads)
        if gy_grads is not None:
            opt_gy.step(g_y.parameters(), gy_grads)
        return d_x, d_y, l_val

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        ep_dx, ep_dy, ep_loss = [], [], []
        for b_start in range(0, n, config.batch_size):
            idx = order[b_start:b_start + config.batch_size]
            if idx.size == 0:
                continue
            try:
                d_x, d_y, l_val = run_batch(epoch, b_start, idx)
            except NumericError as exc:
                raise TrainingDiverged(str(exc), snapshot(epoch, b_start, {})) from exc
            ep_dx.append(d_x)
            ep_dy.append(d_y)
            ep_loss.append(l_val)

        mult_trace_x.append(lambda_x.copy())
        mult_trace_y.append(lambda_y)
        con_trace_x.append(np.mean(ep_dx, axis=0))
        con_trace_y.append(float(np.mean(ep_dy)))
        loss_trace.append(float(np.mean(ep_loss)))

    pp = TrainedPreprocessor(
        g_x=g_x, g_y=g_y, h_up=h_up, critic=critic, config=config,
        blocks=blocks, constraints=spec, task=task,
        multiplier_trace={"lambda_x": np.array(mult_trace_x),
                          "lambda_y": np.array(mult_trace_y)},
        constraint_trace={"delta_x": np.array(con_trace_x),
                          "delta_y": np.array(con_trace_y)},
        loss_trace=loss_trace,
    )
    pp.assert_wiring()
    pp.final_train_transform = pp.transform_covariates(x_all, a_all)
    return pp


# ---------------------------------------------------------------------------
# Plain supervised fits (baselines and the joint-risk estimate)
# ---------------------------------------------------------------------------


def _fit_supervised(inputs: np.ndarray, y: np.ndarray, task: str, *, seed: int = 0,
                    epochs: int = 60, batch_size: int = 200, lr: float = 3e-3,
                    hidden: int = 64, depth: int = 3) -> tuple[DenseNet, float]:
    """Fit a plain dense net and return it with its final training risk."""
    net = make_upstream(inputs.shape[1], task, hidden=hidden, depth=depth,
                        dropout=0.0, seed=seed)
    opt = Adam(lr=lr)
    rng = np.random.default_rng(seed + 17)
    n = inputs.shape[0]
    loss_kind = "cross_entropy" if task == "classification" else "squared_error"
    if task == "classification":
        target = np.zeros((n, 2))
        target[np.arange(n), y.astype(int)] = 1.0
    else:
        target = y[:, None]
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(0, n, batch_size):
            idx = order[b:b + batch_size]
            pred = net.forward(inputs[idx], training=True)
            opt.step(net.parameters(),
                     net.backward(_loss_grad_pred(loss_kind, target[idx], pred)))
    pred = net.forward(inputs)
    return net, _loss_value(loss_kind, target, pred)


def fit_plain_upstream(x: np.ndarray, y: np.ndarray, task: str, *, seed: int = 0,
                       **kwargs) -> tuple[DenseNet, float]:
    """Baseline risk minimizer on the original covariates (no fairness terms)."""
    return _fit_supervised(x, y, task, seed=seed, **kwargs)


def estimate_joint_risk(x: np.ndarray, a: np.ndarray, y: np.ndarray, task: str,
                        *, seed: int = 0, **kwargs) -> float:
    """Plug-in estimate of the minimal risk when predicting the outcome from
    covariates and sensitive attributes jointly."""
    _, risk = _fit_supervised(np.hstack([x, a]), y, task, seed=seed, **kwargs)
    return risk
