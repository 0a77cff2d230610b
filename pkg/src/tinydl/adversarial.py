"""Gradient-direction input perturbations and robustness tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .layers import softmax
from .model import Model, evaluate


class ZeroGradientError(ValueError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 0.04  # fraction of the input range
    target_class: int | None = None  # None: untargeted
    mode: str = "scaled"  # scaled: g / max|g| per image; sign: sign(g)
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.mode not in ("scaled", "sign"):
            raise ValueError(f"unknown attack mode {self.mode!r}")


def input_gradient(model: Model, x, labels=None, target_class=None):
    """Gradient w.r.t. the input of the per-image attack objective (summed over the batch).

    Untargeted: the cross-entropy of the true labels (or of the model's own
    prediction when ``labels`` is None). Targeted: the log-probability of
    ``target_class``. In both cases moving along +gradient is the attack.
    """
    was_training = model.training
    model.eval()
    try:
        logits = model.forward(x, logits=True)
        probs = softmax(logits)
        if target_class is not None:
            onehot = np.zeros_like(probs)
            onehot[:, target_class] = 1.0
            sign = -1.0  # ascend log p(target) = descend its cross-entropy
        else:
            onehot = labels if labels is not None else np.eye(probs.shape[1])[np.argmax(probs, axis=1)]
            sign = 1.0
        g = probs * onehot.sum(axis=1, keepdims=True) - onehot
        grad = model.backward(sign * g, input_grad=True)
    finally:
        model._set_mode(was_training)
    return grad


def attack_loss(model: Model, x, labels):
    """Summed cross-entropy that the untargeted attack ascends."""
    was_training = model.training
    model.eval()
    try:
        logits = model.forward(x, logits=True)
    finally:
        model._set_mode(was_training)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.sum(labels * logp))


def perturb(model: Model, x, config: AttackConfig | None = None, labels=None, allow_zero: bool = False):
    """x + eps*range*direction, clamped to the input bounds."""
    config = config or AttackConfig()
    if config.epsilon == 0.0:
        return x.copy()
    g = input_gradient(model, x, labels, config.target_class)
    flat = g.reshape(g.shape[0], -1)
    if config.mode == "sign":
        direction = np.sign(flat)
    else:
        scale = np.abs(flat).max(axis=1, keepdims=True)
        zero = scale[:, 0] == 0
        if zero.any() and not allow_zero:
            raise ZeroGradientError(f"zero input gradient for {int(zero.sum())} image(s); no attack direction")
        direction = np.divide(flat, scale, out=np.zeros_like(flat), where=scale > 0)
    if not allow_zero and not np.any(direction):
        raise ZeroGradientError("zero input gradient; no attack direction")
    step = config.epsilon * (config.hi - config.lo)
    return np.clip(x + step * direction.reshape(x.shape), config.lo, config.hi)


def robustness_report(model: Model, dataset, epsilons, mode: str = "scaled",
                      target_class=None, chunk: int = 500):
    """Adversarial accuracy for each epsilon, as a list of (epsilon, accuracy)."""
    rows = []
    for eps in epsilons:
        if eps == 0:
            acc, _ = evaluate(model, dataset)
            rows.append((float(eps), acc))
            continue
        cfg = AttackConfig(epsilon=float(eps), target_class=target_class, mode=mode)
        correct = 0
        for s in range(0, len(dataset), chunk):
            xs = dataset.images[s:s + chunk]
            ys = dataset.labels[s:s + chunk]
            adv = perturb(model, xs, cfg, labels=ys, allow_zero=True)
            pred = np.argmax(model.eval().predict_proba(adv), axis=1)
            correct += int(np.sum(pred == np.argmax(ys, axis=1)))
        rows.append((float(eps), correct / len(dataset)))
    return rows


def write_report(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epsilon", "adv_accuracy"])
        for eps, acc in rows:
            w.writerow([repr(eps), repr(acc)])
