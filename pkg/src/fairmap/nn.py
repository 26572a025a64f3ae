"""Minimal dense-network engine: forward/backward MLPs with Adam.

Only what the training loops need: float64 matrices, relu/identity/softmax/
sigmoid activations, inverted dropout on hidden layers, reverse-mode gradients
for parameters and inputs, an Adam optimizer defaulting to ``beta1 = 0``, and
a Gumbel-softmax head for categorical outputs.  No general computation graphs.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_FORMAT = "fairmap-densenet-v1"
ACTIVATIONS = ("relu", "identity", "softmax", "sigmoid")


class ShapeError(ValueError):
    """Dimension mismatch between an input and a network."""


class StateError(RuntimeError):
    """Backward called without a cached forward pass."""


class NumericError(ArithmeticError):
    """A public operation produced non-finite values."""


class ParameterError(ValueError):
    """An operation was called with an out-of-range parameter."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(s: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # rowwise Jacobian-vector product: s * (g - <g, s>)
    return s * (grad - (grad * s).sum(axis=1, keepdims=True))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    if kind == "softmax":
        return softmax(z)
    if kind == "sigmoid":
        return _sigmoid(z)
    raise ParameterError(f"unknown activation {kind!r}")


def _activate_backward(z: np.ndarray, out: np.ndarray, grad: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return grad * (z > 0.0)
    if kind == "identity":
        return grad
    if kind == "softmax":
        return softmax_backward(out, grad)
    if kind == "sigmoid":
        return grad * out * (1.0 - out)
    raise ParameterError(f"unknown activation {kind!r}")


class DenseNet:
    """A feed-forward stack of dense layers.

    ``dims`` gives the widths ``[in, h1, ..., out]``; ``activations`` one tag
    per layer (default: relu on hidden layers, identity on the last).  Dropout
    is applied after hidden activations in training mode only; inference is a
    pure function of (parameters, input).
    """

    def __init__(self, dims: Sequence[int], activations: Sequence[str] | None = None,
                 *, dropout: float = 0.0, seed: int = 0):
        if len(dims) < 2:
            raise ParameterError("need at least input and output dims")
        if activations is None:
            activations = ["relu"] * (len(dims) - 2) + ["identity"]
        if len(activations) != len(dims) - 1:
            raise ParameterError("one activation per layer required")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {act!r}")
        if not 0.0 <= dropout < 1.0:
            raise ParameterError("dropout must lie in [0, 1)")
        self.dims = list(dims)
        self.activations = list(activations)
        self.dropout = dropout
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(self.rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache: dict | None = None
        self.input_grad: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input (n, {self.in_dim}), got {x.shape}")
        inputs, pre, act_out, masks = [], [], [], []
        h = x
        last = len(self.weights) - 1
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            inputs.append(h)
            z = h @ w + b
            out = _activate(z, act)
            mask = None
            if training and self.dropout > 0.0 and i < last:
                keep = 1.0 - self.dropout
                mask = (self.rng.random(out.shape) < keep) / keep
            pre.append(z)
            act_out.append(out)
            masks.append(mask)
            h = out if mask is None else out * mask
        self._cache = {"inputs": inputs, "pre": pre, "act": act_out, "masks": masks,
                       "out_shape": h.shape}
        return _check_finite(h, "forward output")

    def backward(self, grad_out: np.ndarray) -> list[np.ndarray]:
        """Backpropagate ``dL/d(output)``; returns grads in ``parameters()`` order.

        Also stores ``dL/d(input)`` in :attr:`input_grad` so callers can chain
        networks.
        """
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        grad = np.asarray(grad_out, dtype=np.float64)
        cache = self._cache
        if grad.shape != cache["out_shape"]:
            raise ShapeError(
                f"upstream grad shape {grad.shape} != output shape {cache['out_shape']}"
            )
        grads_w: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        grads_b: list[np.ndarray] = [None] * len(self.biases)  # type: ignore[list-item]
        for i in reversed(range(len(self.weights))):
            mask = cache["masks"][i]
            if mask is not None:
                grad = grad * mask
            grad = _activate_backward(cache["pre"][i], cache["act"][i], grad,
                                      self.activations[i])
            grads_w[i] = cache["inputs"][i].T @ grad
            grads_b[i] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        self.input_grad = grad
        out: list[np.ndarray] = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend((gw, gb))
        return out

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        current = self.parameters()
        if len(params) != len(current):
            raise ShapeError("parameter count mismatch")
        for dst, src in zip(current, params):
            src = np.asarray(src, dtype=np.float64)
            if src.shape != dst.shape:
                raise ShapeError(f"parameter shape {src.shape} != {dst.shape}")
            dst[...] = src

    # -- checkpointing -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "dims": self.dims,
            "activations": self.activations,
            "dropout": self.dropout,
            "seed": self.seed,
            "params": [p.ravel().tolist() for p in self.parameters()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNet":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ParameterError(f"unsupported checkpoint format {doc.get('format')!r}")
        net = cls(doc["dims"], doc["activations"], dropout=doc["dropout"], seed=doc["seed"])
        params = [np.array(flat).reshape(p.shape)
                  for flat, p in zip(doc["params"], net.parameters())]
        net.set_parameters(params)
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DenseNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adam with bias correction; ``beta1 = 0`` by default, so the update is
    the raw gradient over a bias-corrected RMS."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.0, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr < 0:
            raise ParameterError("learning rate must be >= 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """Update ``params`` in place by one Adam step on ``grads``."""
        if len(params) != len(grads):
            raise ShapeError("params/grads length mismatch")
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: Adam, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """Functional alias for :meth:`Adam.step`."""
    state.step(params, grads)


# ---------------------------------------------------------------------------
# Gumbel-softmax head
# ---------------------------------------------------------------------------

_GUMBEL_EPS = 1e-12


def gumbel_softmax(logits: np.ndarray, temperature: float, hard: bool = False,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample rows from the Gumbel-softmax relaxation of the logits.

    Soft samples are rows on the simplex; with ``hard`` the perturbed argmax
    is returned one-hot (use :func:`gumbel_softmax_backward` on the soft
    sample for straight-through gradients).
    """
    if temperature <= 0.0:
        raise ParameterError("temperature must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-d")
    rng = rng or np.random.default_rng()
    u = rng.uniform(_GUMBEL_EPS, 1.0 - _GUMBEL_EPS, size=logits.shape)
    g = -np.log(-np.log(u))
    soft = softmax((logits + g) / temperature)
    if not hard:
        return soft
    out = np.zeros_like(soft)
    out[np.arange(soft.shape[0]), np.argmax(soft, axis=1)] = 1.0
    return out


def gumbel_softmax_backward(soft: np.ndarray, grad: np.ndarray, temperature: float) -> np.ndarray:
    """Gradient w.r.t. the logits through a (soft or straight-through) sample."""
    return softmax_backward(soft, grad) / temperature
