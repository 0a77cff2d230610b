"""Line-oriented model/training configuration.

    # comment
    input 28 28 1
    conv filters=8 kernel=5 stride=1 pad=same act=relu
    pool window=2 stride=2
    flatten
    dense units=256 act=relu
    dropout p=0.25
    batchnorm
    act kind=prelu a=0.1
    dense units=10 act=softmax
    [train]
    optimizer=adam eta=0.0025 decay=2000 batch=64 iters=10000 seed=42

Everything after ``[train]`` is ``key=value`` pairs, any number per line.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

LAYER_KEYS = {
    "conv": {"filters", "kernel", "stride", "pad", "act", "a"},
    "pool": {"window", "stride"},
    "flatten": set(),
    "dense": {"units", "act", "a"},
    "dropout": {"p"},
    "batchnorm": {"epsilon", "momentum"},
    "act": {"kind", "a"},
}
REQUIRED_KEYS = {
    "conv": {"filters", "kernel"},
    "dense": {"units"},
    "dropout": {"p"},
    "act": {"kind"},
}


class ConfigError(ValueError):
    def __init__(self, message, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class LayerDecl:
    kind: str
    args: dict = field(default_factory=dict)
    line: int | None = None

    def get(self, key, default=None):
        return self.args.get(key, default)

    def describe(self) -> str:
        parts = [self.kind] + [f"{k}={v}" for k, v in self.args.items()]
        where = f" (line {self.line})" if self.line is not None else ""
        return " ".join(parts) + where


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    eta: float = 0.0025
    decay: float | None = None
    alpha: float | None = None
    gamma: float | None = None
    opt_epsilon: float = 1e-8
    batch: int = 64
    iters: int = 1000
    lam: float = 0.0
    seed: int = 42
    loss: str = "softmax_ce"  # softmax_ce | ce
    ce_epsilon: float = 1e-4
    log_base: str = "natural"
    reduction: str = "mean"
    init: str = "truncated_normal"  # truncated_normal | normal | he | zeros
    stddev: float = 0.1
    bias: float = 0.1
    sampling: str = "random"  # random | epoch
    preprocess: str = "none"
    augment: tuple = ()
    eval_every: int = 100
    train_eval_samples: int = 1000
    dropout_convention: str = "inverted"


# config key -> (TrainConfig field, parser)
def _opt_float(v):
    return None if v.lower() in ("none", "0", "off") else float(v)


def _augment(v):
    return tuple(x for x in v.split(",") if x and x != "none")


TRAIN_KEYS = {
    "optimizer": ("optimizer", str),
    "eta": ("eta", float),
    "decay": ("decay", _opt_float),
    "alpha": ("alpha", float),
    "gamma": ("gamma", float),
    "opt_epsilon": ("opt_epsilon", float),
    "batch": ("batch", int),
    "iters": ("iters", int),
    "lambda": ("lam", float),
    "seed": ("seed", int),
    "loss": ("loss", str),
    "ce_epsilon": ("ce_epsilon", float),
    "log_base": ("log_base", str),
    "reduction": ("reduction", str),
    "init": ("init", str),
    "stddev": ("stddev", float),
    "bias": ("bias", float),
    "sampling": ("sampling", str),
    "preprocess": ("preprocess", str),
    "augment": ("augment", _augment),
    "eval_every": ("eval_every", int),
    "train_eval_samples": ("train_eval_samples", int),
    "dropout_convention": ("dropout_convention", str),
}

CHOICES = {
    "optimizer": ("sgd", "momentum", "adagrad", "rmsprop", "adam"),
    "loss": ("softmax_ce", "ce"),
    "log_base": ("natural", "base2"),
    "reduction": ("mean", "sum"),
    "init": ("truncated_normal", "normal", "he", "zeros"),
    "sampling": ("random", "epoch"),
    "preprocess": ("none", "mean_image", "zscore", "pca_whiten"),
    "dropout_convention": ("inverted", "classic"),
}


@dataclass
class ModelSpec:
    input_shape: tuple
    layers: list
    train: TrainConfig = field(default_factory=TrainConfig)
    source: str | None = None

    def with_train(self, **overrides) -> "ModelSpec":
        values = {f.name: getattr(self.train, f.name) for f in fields(TrainConfig)}
        values.update(overrides)
        return ModelSpec(self.input_shape, list(self.layers), TrainConfig(**values), self.source)

    def with_layers(self, layers) -> "ModelSpec":
        return ModelSpec(self.input_shape, list(layers), self.train, self.source)


def _number(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _pairs(tokens, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got {tok!r}", lineno)
        k, v = tok.split("=", 1)
        if not k or not v:
            raise ConfigError(f"malformed pair {tok!r}", lineno)
        out[k] = v
    return out


def parse_config(text: str, source: str | None = None) -> ModelSpec:
    input_shape = None
    layers: list[LayerDecl] = []
    train_values: dict = {}
    in_train = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "[train]":
            in_train = True
            continue
        tokens = line.split()
        if in_train:
            for key, value in _pairs(tokens, lineno).items():
                if key not in TRAIN_KEYS:
                    raise ConfigError(f"unknown training key {key!r}", lineno)
                name, conv = TRAIN_KEYS[key]
                try:
                    parsed = conv(value)
                except ValueError:
                    raise ConfigError(f"bad value {value!r} for {key}", lineno) from None
                if key in CHOICES and parsed not in CHOICES[key]:
                    raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}", lineno)
                train_values[name] = parsed
            continue
        kind, rest = tokens[0], tokens[1:]
        if kind == "input":
            if input_shape is not None or layers:
                raise ConfigError("input must be the first declaration and appear once", lineno)
            try:
                dims = tuple(int(t) for t in rest)
            except ValueError:
                raise ConfigError(f"input dims must be integers: {rest}", lineno) from None
            if not dims or any(d < 1 for d in dims):
                raise ConfigError("input dims must be positive", lineno)
            input_shape = dims
            continue
        if input_shape is None:
            raise ConfigError("first declaration must be 'input H W C'", lineno)
        if kind not in LAYER_KEYS:
            raise ConfigError(f"unknown layer kind {kind!r}", lineno)
        args = {k: _number(v) for k, v in _pairs(rest, lineno).items()}
        unknown = set(args) - LAYER_KEYS[kind]
        if unknown:
            raise ConfigError(f"unknown {kind} option(s): {sorted(unknown)}", lineno)
        missing = REQUIRED_KEYS.get(kind, set()) - set(args)
        if missing:
            raise ConfigError(f"{kind} needs {sorted(missing)}", lineno)
        layers.append(LayerDecl(kind, args, lineno))
    if input_shape is None:
        raise ConfigError("config has no 'input' declaration")
    try:
        train = TrainConfig(**train_values)
    except TypeError as exc:  # pragma: no cover - keys are validated above
        raise ConfigError(str(exc)) from None
    return ModelSpec(input_shape, layers, train, source)


def load_config(path) -> ModelSpec:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), source=os.fspath(path))
