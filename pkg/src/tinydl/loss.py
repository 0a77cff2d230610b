"""Cross-entropy losses and the L2 weight penalty.

Losses return ``(value, gradient)`` pairs. The batch reduction happens here:
``mean`` divides by the batch size, ``sum`` keeps the raw total (the form
used by the original shallow-softmax training script).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import softmax
from .tensor import ShapeError


@dataclass
class LossConfig:
    epsilon: float = 1e-4
    log_base: str = "natural"  # natural | base2
    lam: float = 0.0
    reduction: str = "mean"  # mean | sum

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.log_base not in ("natural", "base2"):
            raise ValueError(f"unknown log base {self.log_base!r}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def _check_pair(y_true, y_pred):
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ShapeError(f"labels {y_true.shape} and predictions {y_pred.shape} must be matching (B, C)")


def _reduce(per_sample: np.ndarray, reduction: str) -> float:
    return float(per_sample.sum() if reduction == "sum" else per_sample.mean())


def cross_entropy_per_sample(y_true, y_pred, config: LossConfig | None = None) -> np.ndarray:
    """-sum_j y_j log(yhat_j + eps) for each row."""
    config = config or LossConfig()
    _check_pair(y_true, y_pred)
    if np.any(y_pred < 0):
        raise ValueError("predicted probabilities must be non-negative")
    logs = np.log(y_pred + config.epsilon)
    if config.log_base == "base2":
        logs = logs / math.log(2.0)
    return -np.sum(y_true * logs, axis=1)


def cross_entropy(y_true, y_pred, config: LossConfig | None = None):
    """Batch cross-entropy on probabilities and its gradient w.r.t. ``y_pred``."""
    config = config or LossConfig()
    per_sample = cross_entropy_per_sample(y_true, y_pred, config)
    grad = -y_true / (y_pred + config.epsilon)
    if config.log_base == "base2":
        grad = grad / math.log(2.0)
    if config.reduction == "mean":
        grad = grad / y_true.shape[0]
    return _reduce(per_sample, config.reduction), grad


def softmax_cross_entropy_with_logits(y_true, logits, reduction: str = "mean"):
    """Stable softmax + natural-log cross-entropy; gradient is w.r.t. the logits."""
    _check_pair(y_true, logits)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    per_sample = -np.sum(y_true * (z - log_norm), axis=1)
    grad = softmax(logits) * y_true.sum(axis=1, keepdims=True) - y_true
    if reduction == "mean":
        grad = grad / y_true.shape[0]
    return _reduce(per_sample, reduction), grad


def l2_penalty(weights, lam: float):
    """lam * sum of squared weights, plus the gradient 2*lam*W for each tensor."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    weights = list(weights)
    value = lam * sum(float(np.sum(w * w)) for w in weights)
    return value, [2.0 * lam * w for w in weights]
