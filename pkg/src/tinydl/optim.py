"""Parameter update rules and the exponential learning-rate schedule.

Momentum and RMSProp use the convex-combination form
``W+ = W + a (W - W_prev) + (1 - a) * step`` rather than the usual additive
velocity, so ``alpha`` weights the previous displacement against the new
step. All buffers are created lazily, zero-filled, on a parameter's first
update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("sgd", "momentum", "adagrad", "rmsprop", "adam")

DEFAULTS = {
    "sgd": dict(eta=0.01, alpha=0.0, gamma=0.0),
    "momentum": dict(eta=0.01, alpha=0.9, gamma=0.0),
    "adagrad": dict(eta=0.1, alpha=0.0, gamma=0.0),
    "rmsprop": dict(eta=0.001, alpha=0.9, gamma=0.9),
    "adam": dict(eta=0.001, alpha=0.9, gamma=0.999),
}


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class DecaySchedule:
    """eta(k) = eta0 * exp(-k / d); ``d=None`` keeps eta constant."""

    eta0: float
    d: float | None = None

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.d is not None and self.d <= 0:
            raise ValueError("decay rate d must be positive")

    def eta(self, k: int) -> float:
        if k < 0:
            raise ValueError("iteration index must be non-negative")
        if self.d is None:
            return self.eta0
        return self.eta0 * math.exp(-k / self.d)


def decayed_eta(schedule: DecaySchedule, k: int) -> float:
    return schedule.eta(k)


@dataclass
class OptimizerState:
    kind: str = "sgd"
    eta: float | None = None
    alpha: float | None = None
    gamma: float | None = None
    epsilon: float = 1e-8
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {KINDS}")
        d = DEFAULTS[self.kind]
        if self.eta is None:
            self.eta = d["eta"]
        if self.alpha is None:
            self.alpha = d["alpha"]
        if self.gamma is None:
            self.gamma = d["gamma"]
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.alpha < 1.0 or not 0.0 <= self.gamma < 1.0:
            raise ValueError("alpha and gamma must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def _buf(self, name, key, like):
        slot = self.buffers.setdefault(name, {})
        if key not in slot:
            slot[key] = np.zeros_like(like)
        return slot[key]

    def step(self, named_params, eta: float | None = None):
        """Update every ``(name, param, grad)`` triple in place, in order.

        ``eta`` overrides the base learning rate (used for decay schedules).
        Adam's time step advances once per call, not once per parameter.
        """
        eta = self.eta if eta is None else eta
        named_params = list(named_params)
        for name, _, g in named_params:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        update = getattr(self, f"_{self.kind}")
        for name, p, g in named_params:
            update(name, p, g, eta)

    def _sgd(self, name, p, g, eta):
        p -= eta * g

    def _blend(self, name, p, step):
        # W+ = W + alpha * (W - W_prev) + (1 - alpha) * step
        prev = self._buf("prev_delta", name, p)
        delta = self.alpha * prev + (1.0 - self.alpha) * step
        p += delta
        prev[...] = delta

    def _momentum(self, name, p, g, eta):
        self._blend(name, p, -eta * g)

    def _adagrad(self, name, p, g, eta):
        acc = self._buf("g_accum", name, p)
        acc += g * g
        p -= eta * g / (np.sqrt(acc) + self.epsilon)

    def _rmsprop(self, name, p, g, eta):
        acc = self._buf("g_accum", name, p)
        acc *= self.gamma
        acc += (1.0 - self.gamma) * g * g
        self._blend(name, p, -eta * g / (np.sqrt(acc) + self.epsilon))

    def _adam(self, name, p, g, eta):
        m = self._buf("m", name, p)
        v = self._buf("g_accum", name, p)
        t = self.step_count
        m *= self.alpha
        m += (1.0 - self.alpha) * g
        v *= self.gamma
        v += (1.0 - self.gamma) * g * g
        m_hat = m / (1.0 - self.alpha ** t)
        v_hat = v / (1.0 - self.gamma ** t)
        p -= eta * m_hat / (np.sqrt(v_hat) + self.epsilon)


def sgd_step(params, grads, eta):
    """Functional SGD: returns new arrays ``W - eta * g``."""
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {i}")
        out.append(p - eta * g)
    return out


def _functional(kind):
    def step(state: OptimizerState, params, grads):
        if state.kind != kind:
            raise ValueError(f"state is configured for {state.kind!r}, not {kind!r}")
        new = [np.array(p, dtype=np.float64, copy=True) for p in params]
        state.step([(str(i), p, g) for i, (p, g) in enumerate(zip(new, grads))])
        return new
    step.__name__ = f"{kind}_step"
    return step


momentum_step = _functional("momentum")
adagrad_step = _functional("adagrad")
rmsprop_step = _functional("rmsprop")
adam_step = _functional("adam")
