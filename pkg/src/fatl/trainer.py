"""Full-batch gradient descent for penalized logistic regression.

Objective::

    L(W, b) = mean_i CE(sigmoid(W.x_i + b), y_i)
              + gamma/2 * |W|^2 + lam/2 * (b - b_anchor)^2

``gamma`` (``l2_weight``) acts on the weights only; ``lam``
(``bias_anchor_lambda``) pulls the bias toward ``b_anchor``, the mean
source bias frozen at transfer time.

Step sizes are per block: weights and bias each take
``min(learning_rate, 1/L_block)`` where ``L_block`` bounds that block of
the Hessian (``lam`` enters the bias block only). This keeps every epoch a
descent step even for very large ``lam``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, DivergenceError, TrainError

LOGIT_CLAMP = 500.0
_BELOW_ONE = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 500
    l2_weight: float = 1e-3
    bias_anchor_lambda: float = 0.0
    bias_anchor_value: float = 0.0
    seed: int = 0
    convergence_tol: float = 1e-10

    def __post_init__(self):
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise TrainError("learning_rate must be finite and >= 0")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise TrainError("epochs must be a positive integer")
        if self.l2_weight < 0 or self.bias_anchor_lambda < 0 or self.convergence_tol < 0:
            raise TrainError("l2_weight, bias_anchor_lambda and convergence_tol must be >= 0")
        if not (0 <= int(self.seed) < 2**64):
            raise TrainError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "epochs", int(self.epochs))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "l2_weight": self.l2_weight,
            "bias_anchor_lambda": self.bias_anchor_lambda,
            "bias_anchor_value": self.bias_anchor_value,
            "seed": self.seed,
            "convergence_tol": self.convergence_tol,
        }

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise TrainError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float


@dataclass(frozen=True, eq=False)
class TrainTrace:
    initial_loss: float
    losses: np.ndarray
    final_grad_norm: float
    epochs_run: int
    step_weights: float = 0.0
    step_bias: float = 0.0

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss"])
            writer.writerow([0, repr(float(self.initial_loss))])
            for k, loss in enumerate(self.losses, start=1):
                writer.writerow([k, repr(float(loss))])


def sigmoid(z):
    """Overflow-safe logistic function with values strictly inside (0, 1)."""
    z = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # above z ~ 37 the quotient rounds to exactly 1.0
    return np.minimum(p, _BELOW_ONE)


def _check_shapes(X, y, W):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    W = np.asarray(W, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],) or W.shape != (X.shape[1],):
        raise DimensionError(f"shape mismatch: X {X.shape}, y {y.shape}, W {W.shape}")
    return X, y, W


def loss_and_gradient(X, y, W, b, config: TrainConfig):
    """Objective value and its gradient with respect to ``W`` and ``b``."""
    X, y, W = _check_shapes(X, y, W)
    n = X.shape[0]
    gamma, lam, anchor = config.l2_weight, config.bias_anchor_lambda, config.bias_anchor_value
    z = X @ W + b
    # log(1 + e^z) - y z is the cross-entropy written in logits
    ce = float(np.mean(np.logaddexp(0.0, z) - y * z))
    loss = ce + 0.5 * gamma * float(W @ W) + 0.5 * lam * (b - anchor) ** 2
    r = sigmoid(z) - y
    grad_w = X.T @ r / n + gamma * W
    grad_b = float(np.mean(r)) + lam * (b - anchor)
    return loss, grad_w, grad_b


def block_steps(X, config: TrainConfig) -> tuple[float, float]:
    """Per-block step sizes that guarantee monotone descent."""
    X = np.asarray(X, dtype=float)
    n, m = X.shape
    top = float(np.linalg.eigvalsh(X.T @ X / n)[-1]) if m else 0.0
    # the CE Hessian is bounded by 1/4 [X 1]^T [X 1] / n, which is at most
    # twice its block diagonal
    lip_w = 0.5 * top + config.l2_weight
    lip_b = 0.5 + config.bias_anchor_lambda
    step_w = config.learning_rate if lip_w == 0 else min(config.learning_rate, 1.0 / lip_w)
    step_b = min(config.learning_rate, 1.0 / lip_b)
    return step_w, step_b


def train_logistic(X, y, init=None, config: TrainConfig = TrainConfig()):
    """Fit ``(W, b)`` by deterministic full-batch gradient descent.

    ``init`` is a ``(weights, bias)`` pair; zeros when omitted. Returns the
    fitted :class:`LinearModel` and a :class:`TrainTrace`.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if X.shape[0] < 2:
        raise TrainError("need at least two training rows")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise TrainError("training data contains non-finite entries")
    if not np.all((y == 0) | (y == 1)):
        raise TrainError("labels must be 0/1")
    if y.min() == y.max():
        raise TrainError("training labels contain a single class")

    if init is None:
        W, b = np.zeros(X.shape[1]), 0.0
    else:
        W, b = np.array(init[0], dtype=float), float(init[1])
    _check_shapes(X, y, W)

    step_w, step_b = block_steps(X, config)
    loss, gw, gb = loss_and_gradient(X, y, W, b, config)
    if not math.isfinite(loss):
        raise DivergenceError(0, loss)
    initial = loss
    losses = []
    for epoch in range(1, config.epochs + 1):
        W = W - step_w * gw
        b = b - step_b * gb
        new_loss, gw, gb = loss_and_gradient(X, y, W, b, config)
        if not math.isfinite(new_loss) or not np.all(np.isfinite(W)) or not math.isfinite(b):
            raise DivergenceError(epoch, new_loss)
        losses.append(new_loss)
        improvement = loss - new_loss
        loss = new_loss
        if improvement < config.convergence_tol:
            break
    grad_norm = math.sqrt(float(gw @ gw) + gb * gb)
    trace = TrainTrace(initial, np.array(losses), grad_norm, len(losses), step_w, step_b)
    return LinearModel(W, b), trace


def predict_proba(model, x) -> np.ndarray | float:
    """``sigmoid(W.x + b)`` for one standardized record or a matrix of them."""
    x = np.asarray(x, dtype=float)
    z = x @ np.asarray(model.weights, dtype=float) + float(model.bias)
    p = sigmoid(z)
    return float(p) if np.ndim(p) == 0 else p
