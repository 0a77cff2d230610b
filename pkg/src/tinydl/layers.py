"""Layers with hand-written forward and backward passes.

Every layer consumes a batch whose first axis is the sample index and caches
whatever its backward pass needs. Parameter gradients are raw sums over the
batch; the loss is the only place that divides by the batch size.
"""
from __future__ import annotations

import numpy as np

from . import conv as convops
from .tensor import ShapeError, add_row_broadcast, matmul


class StateError(RuntimeError):
    """Raised when a layer is used out of order (e.g. backward before forward)."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.frozen = False
        self.training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray, need_input: bool = True) -> np.ndarray | None:
        """Set parameter gradients and return d(loss)/d(input).

        With ``need_input=False`` layers may skip the input gradient and
        return ``None`` (used for the first layer of a network).
        """
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        """Per-sample output shape for a per-sample input shape."""
        return tuple(in_shape)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def after_update(self):
        """Hook run after the optimizer touched this layer's parameters."""

    def zero_grads(self):
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def _need(self, attr):
        value = getattr(self, attr, None)
        if value is None:
            raise StateError(f"{self.kind}: backward called before forward")
        return value

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    kind = "dense"

    def __init__(self, fan_in: int, units: int):
        super().__init__()
        self.params["weight"] = np.zeros((fan_in, units))
        self.params["bias"] = np.zeros(units)
        self.zero_grads()
        self._x = None

    @property
    def fan_in(self):
        return self.params["weight"].shape[0]

    @property
    def units(self):
        return self.params["weight"].shape[1]

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.fan_in,):
            raise ShapeError(f"dense expects input ({self.fan_in},), got {tuple(in_shape)}")
        return (self.units,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.fan_in:
            raise ShapeError(f"dense expects (B, {self.fan_in}) input, got {x.shape}")
        self._x = x
        return add_row_broadcast(matmul(x, self.params["weight"]), self.params["bias"])

    def backward(self, upstream, need_input=True):
        x = self._need("_x")
        if upstream.shape != (x.shape[0], self.units):
            raise ShapeError(f"dense upstream {upstream.shape} != output {(x.shape[0], self.units)}")
        self.grads["weight"] = x.T @ upstream
        self.grads["bias"] = upstream.sum(axis=0)
        return upstream @ self.params["weight"].T if need_input else None

    def __repr__(self):
        return f"Dense({self.fan_in}->{self.units})"


class Conv2D(Layer):
    """Filter bank ``[n_filters, k, k, depth]`` over NHWC input."""

    kind = "conv"

    def __init__(self, depth: int, n_filters: int, kernel: int, stride: int = 1, padding: str = "same"):
        super().__init__()
        if stride < 1 or kernel < 1:
            raise ValueError("kernel and stride must be positive")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        self.stride = stride
        self.padding = padding
        self.params["weight"] = np.zeros((n_filters, kernel, kernel, depth))
        self.params["bias"] = np.zeros(n_filters)
        self.zero_grads()
        self._cols = None

    @property
    def kernel(self):
        return self.params["weight"].shape[1]

    @property
    def depth(self):
        return self.params["weight"].shape[3]

    @property
    def n_filters(self):
        return self.params["weight"].shape[0]

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv expects (H, W, C) input, got {tuple(in_shape)}")
        h, w, c = in_shape
        if c != self.depth:
            raise ShapeError(f"conv filters have depth {self.depth}, input has {c} channels")
        k, s = self.kernel, self.stride
        hp = h + sum(convops.pad_amounts(h, k, s, self.padding))
        wp = w + sum(convops.pad_amounts(w, k, s, self.padding))
        if k > hp or k > wp:
            raise ShapeError(f"conv window {k} larger than padded input {hp}x{wp}")
        return ((hp - k) // s + 1, (wp - k) // s + 1, self.n_filters)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"conv expects (B, H, W, C) input, got {x.shape}")
        self.output_shape(x.shape[1:])
        xp, _, _ = convops.pad_input(x, self.kernel, self.stride, self.padding)
        cols = convops.im2col(xp, self.kernel, self.stride)
        self._cols = cols
        self._x_shape = x.shape
        self._xp_shape = xp.shape
        w = self.params["weight"].reshape(self.n_filters, -1)
        return cols @ w.T + self.params["bias"]

    def backward(self, upstream, need_input=True):
        cols = self._need("_cols")
        b, ho, wo, _ = cols.shape
        if upstream.shape != (b, ho, wo, self.n_filters):
            raise ShapeError(f"conv upstream {upstream.shape} != output {(b, ho, wo, self.n_filters)}")
        g2 = upstream.reshape(-1, self.n_filters)
        c2 = cols.reshape(-1, cols.shape[-1])
        self.grads["weight"] = (g2.T @ c2).reshape(self.params["weight"].shape)
        self.grads["bias"] = g2.sum(axis=0)
        if not need_input:
            return None
        w = self.params["weight"].reshape(self.n_filters, -1)
        dcols = (g2 @ w).reshape(cols.shape)
        dxp = convops.col2im(dcols, self._xp_shape, self.kernel, self.stride)
        _, h, wd, _ = self._x_shape
        ph = convops.pad_amounts(h, self.kernel, self.stride, self.padding)
        pw = convops.pad_amounts(wd, self.kernel, self.stride, self.padding)
        return dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + wd, :]

    def __repr__(self):
        return f"Conv2D({self.n_filters}@{self.kernel}x{self.kernel}x{self.depth}, s{self.stride}, {self.padding})"


class MaxPool2D(Layer):
    kind = "pool"

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        if window < 1 or stride < 1:
            raise ValueError("window and stride must be positive")
        self.window = window
        self.stride = stride
        self._arg = None

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"pool expects (H, W, C) input, got {tuple(in_shape)}")
        h, w, c = in_shape
        if self.window > h or self.window > w:
            raise ShapeError(f"pool window {self.window} larger than input {h}x{w}")
        return ((h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1, c)

    def forward(self, x):
        self.output_shape(x.shape[1:])
        k, s = self.window, self.stride
        win = convops.sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        flat = win.reshape(win.shape[:4] + (k * k,))  # (B, Ho, Wo, C, k*k), row-major in the window
        arg = np.argmax(flat, axis=-1)  # first maximum wins ties
        self._arg = arg
        self._x_shape = x.shape
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, upstream, need_input=True):
        arg = self._need("_arg")
        if upstream.shape != arg.shape:
            raise ShapeError(f"pool upstream {upstream.shape} != output {arg.shape}")
        b, ho, wo, c = arg.shape
        k, s = self.window, self.stride
        rows = np.arange(ho)[None, :, None, None] * s + arg // k
        cols = np.arange(wo)[None, None, :, None] * s + arg % k
        bi = np.broadcast_to(np.arange(b)[:, None, None, None], arg.shape)
        ci = np.broadcast_to(np.arange(c)[None, None, None, :], arg.shape)
        dx = np.zeros(self._x_shape, dtype=upstream.dtype)
        np.add.at(dx, (bi, rows, cols, ci), upstream)
        return dx

    def __repr__(self):
        return f"MaxPool2D(window={self.window}, stride={self.stride})"


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._x_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream, need_input=True):
        return upstream.reshape(self._need("_x_shape"))

    _x_shape = None


ACTIVATIONS = ("relu", "leaky_relu", "prelu", "sigmoid", "tanh", "softmax")
LEAKY_SLOPE = 0.01


def softmax(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Activation(Layer):
    kind = "act"

    def __init__(self, kind: str, prelu_a: float = 0.1):
        super().__init__()
        if kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")
        self.fn = kind
        if kind == "prelu":
            if not 0.0 <= prelu_a <= 1.0:
                raise ValueError("prelu slope must lie in [0, 1]")
            self.params["a"] = np.array([float(prelu_a)])
            self.zero_grads()
        self._x = None
        self._y = None

    def _slope(self):
        return self.params["a"][0] if self.fn == "prelu" else LEAKY_SLOPE

    def forward(self, x):
        self._x = x
        if self.fn == "relu":
            y = np.maximum(x, 0.0)
        elif self.fn in ("leaky_relu", "prelu"):
            y = np.where(x > 0, x, self._slope() * x)
        elif self.fn == "sigmoid":
            y = 1.0 / (1.0 + np.exp(-x))
        elif self.fn == "tanh":
            y = np.tanh(x)
        else:
            y = softmax(x)
        self._y = y
        return y

    def backward(self, upstream, need_input=True):
        x = self._need("_x")
        y = self._y
        if self.fn == "relu":
            return upstream * (x > 0)
        if self.fn in ("leaky_relu", "prelu"):
            if self.fn == "prelu":
                self.grads["a"] = np.array([np.sum(upstream * np.where(x > 0, 0.0, x))])
            return np.where(x > 0, upstream, self._slope() * upstream)
        if self.fn == "sigmoid":
            return upstream * y * (1.0 - y)
        if self.fn == "tanh":
            return upstream * (1.0 - y * y)
        # softmax Jacobian-vector product along the last axis
        return y * (upstream - np.sum(upstream * y, axis=-1, keepdims=True))

    def after_update(self):
        if self.fn == "prelu":
            np.clip(self.params["a"], 0.0, 1.0, out=self.params["a"])

    def __repr__(self):
        return f"Activation({self.fn})"


class Dropout(Layer):
    """Dropout with drop probability ``p``.

    ``convention="inverted"`` scales survivors by 1/(1-p) while training and
    is the identity at eval time. ``convention="classic"`` leaves training
    activations unscaled and multiplies by (1-p) at eval time instead.
    """

    kind = "dropout"

    def __init__(self, p: float, rng: np.random.Generator | None = None, convention: str = "inverted"):
        super().__init__()
        if not 0.0 <= p <= 1.0:
            raise ValueError("dropout probability must lie in [0, 1]")
        if convention not in ("inverted", "classic"):
            raise ValueError(f"unknown dropout convention {convention!r}")
        self.p = p
        self.convention = convention
        self.rng = rng if rng is not None else np.random.default_rng()
        self._scale = None

    def forward(self, x):
        if not self.training:
            factor = 1.0 if self.convention == "inverted" else 1.0 - self.p
            self._scale = np.float64(factor)
            return x * factor
        if self.p >= 1.0:
            raise ValueError("dropout with p=1 zeroes every unit")
        if self.p == 0.0:
            self._scale = np.float64(1.0)
            return x
        keep = self.rng.random(x.shape) >= self.p
        scale = 1.0 / (1.0 - self.p) if self.convention == "inverted" else 1.0
        self._scale = keep * scale
        return x * self._scale

    def backward(self, upstream, need_input=True):
        return upstream * self._need("_scale")

    def __repr__(self):
        return f"Dropout(p={self.p})"


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis except the last."""

    kind = "batchnorm"

    def __init__(self, channels: int, epsilon: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.epsilon = epsilon
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.zero_grads()
        self._xhat = None

    @property
    def channels(self):
        return self.params["gamma"].shape[0]

    def output_shape(self, in_shape):
        if in_shape[-1] != self.channels:
            raise ShapeError(f"batchnorm has {self.channels} channels, input has {in_shape[-1]}")
        return tuple(in_shape)

    def forward(self, x):
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batchnorm needs a batch of at least 2 samples in train mode")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)  # population variance
            if not self.frozen:
                m = self.momentum
                self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mu
                self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mu = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mu) * inv_std
        self._xhat = xhat
        self._inv_std = inv_std
        self._batch_stats = self.training
        return gamma * xhat + beta

    def backward(self, upstream, need_input=True):
        xhat = self._need("_xhat")
        axes = tuple(range(upstream.ndim - 1))
        gamma = self.params["gamma"]
        self.grads["gamma"] = np.sum(upstream * xhat, axis=axes)
        self.grads["beta"] = np.sum(upstream, axis=axes)
        dxhat = upstream * gamma
        if not self._batch_stats:
            return dxhat * self._inv_std
        n = upstream.size // upstream.shape[-1]
        return (self._inv_std / n) * (
            n * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes)
        )

    def __repr__(self):
        return f"BatchNorm({self.channels})"
