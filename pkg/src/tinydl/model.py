"""Model assembly, forward/backward traversal, evaluation and feature taps.

A model is a list of *blocks*, one per config declaration. A block holds the
declared layer plus its fused activation (``act=relu`` on a conv or dense
line), so block indices line up with the declaration order in the config.
"""
from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .config import LayerDecl, ModelSpec
from .loss import LossConfig, cross_entropy_per_sample, softmax_cross_entropy_with_logits
from .tensor import ShapeError


class BuildError(ValueError):
    pass


@dataclass
class Block:
    decl: LayerDecl
    layers: list
    in_shape: tuple
    out_shape: tuple

    @property
    def main(self):
        return self.layers[0]


def _make_layer(decl: LayerDecl, in_shape, rng=None, dropout_convention="inverted"):
    k = decl.kind
    if k == "conv":
        if len(in_shape) != 3:
            raise ShapeError(f"needs (H, W, C) input, got {in_shape}")
        return L.Conv2D(in_shape[2], int(decl.get("filters")), int(decl.get("kernel")),
                        int(decl.get("stride", 1)), str(decl.get("pad", "same")))
    if k == "dense":
        if len(in_shape) != 1:
            raise ShapeError(f"needs a flat input, got {in_shape} (add a flatten line)")
        return L.Dense(in_shape[0], int(decl.get("units")))
    if k == "pool":
        return L.MaxPool2D(int(decl.get("window", 2)), int(decl.get("stride", decl.get("window", 2))))
    if k == "flatten":
        return L.Flatten()
    if k == "dropout":
        return L.Dropout(float(decl.get("p")), rng, dropout_convention)
    if k == "batchnorm":
        return L.BatchNorm(in_shape[-1], float(decl.get("epsilon", 1e-5)), float(decl.get("momentum", 0.9)))
    if k == "act":
        return L.Activation(str(decl.get("kind")), float(decl.get("a", 0.1)))
    raise BuildError(f"unknown layer kind {k!r}")


def _block_layers(decl, in_shape, rng=None, dropout_convention="inverted"):
    main = _make_layer(decl, in_shape, rng, dropout_convention)
    out = [main]
    act = decl.get("act")
    if act is not None and decl.kind in ("conv", "dense") and act != "none":
        out.append(L.Activation(str(act), float(decl.get("a", 0.1))))
    return out


def infer_blocks(spec: ModelSpec, rng=None, dropout_convention="inverted") -> list[Block]:
    """Instantiate zero-valued layers and check every consecutive shape pair."""
    blocks = []
    shape = tuple(spec.input_shape)
    prev = "input " + " ".join(map(str, shape))
    for decl in spec.layers:
        try:
            layers = _block_layers(decl, shape, rng, dropout_convention)
            out = shape
            for layer in layers:
                out = layer.output_shape(out)
        except (ShapeError, ValueError) as exc:
            raise BuildError(f"{decl.describe()} cannot follow {prev} with shape {shape}: {exc}") from None
        blocks.append(Block(decl, layers, shape, tuple(out)))
        shape = tuple(out)
        prev = decl.describe()
    return blocks


def _layer_param_formula(layer, in_shape) -> int:
    if isinstance(layer, L.Conv2D):
        return layer.n_filters * (layer.kernel * layer.kernel * in_shape[-1] + 1)
    if isinstance(layer, L.Dense):
        return layer.units * (in_shape[0] + 1)
    if isinstance(layer, L.BatchNorm):
        return 2 * in_shape[-1]
    if isinstance(layer, L.Activation) and layer.fn == "prelu":
        return 1
    return 0


def param_count(spec: ModelSpec):
    """Per-block trainable parameter counts and their total."""
    counts = []
    for block in infer_blocks(spec):
        shape = block.in_shape
        n = 0
        for layer in block.layers:
            n += _layer_param_formula(layer, shape)
            shape = layer.output_shape(shape)
        counts.append(n)
    return counts, sum(counts)


def _init_weight(shape, fan_in, train, rng):
    if train.init == "zeros":
        return np.zeros(shape)
    if train.init == "he":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    sigma = train.stddev
    w = rng.normal(0.0, sigma, size=shape)
    if train.init == "truncated_normal":
        bad = np.abs(w) > 2 * sigma
        while bad.any():
            w[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
            bad = np.abs(w) > 2 * sigma
    return w


def init_block(block: Block, train, rng, is_output: bool):
    for layer in block.layers:
        if isinstance(layer, (L.Dense, L.Conv2D)):
            w = layer.params["weight"]
            fan_in = w.shape[0] if isinstance(layer, L.Dense) else int(np.prod(w.shape[1:]))
            layer.params["weight"] = _init_weight(w.shape, fan_in, train, rng)
            layer.params["bias"] = np.full(layer.params["bias"].shape, 0.0 if is_output else train.bias)
            layer.zero_grads()


class Model:
    def __init__(self, spec: ModelSpec, blocks: list[Block]):
        self.spec = spec
        self.blocks = blocks
        self.training = True

    @property
    def layers(self):
        return [layer for b in self.blocks for layer in b.layers]

    @property
    def output_shape(self):
        return self.blocks[-1].out_shape if self.blocks else tuple(self.spec.input_shape)

    def train(self):
        self._set_mode(True)
        return self

    def eval(self):
        self._set_mode(False)
        return self

    def _set_mode(self, training):
        self.training = training
        for layer in self.layers:
            layer.training = training

    def set_frozen(self, freeze_below: int):
        if not 0 <= freeze_below <= len(self.blocks):
            raise IndexError(f"freeze_below={freeze_below} outside [0, {len(self.blocks)}]")
        for i, block in enumerate(self.blocks):
            for layer in block.layers:
                layer.frozen = i < freeze_below

    def ends_in_softmax(self) -> bool:
        layers = self.layers
        return bool(layers) and isinstance(layers[-1], L.Activation) and layers[-1].fn == "softmax"

    def forward(self, x, logits: bool = False, upto: int | None = None):
        """Run the network. ``logits=True`` skips a trailing softmax layer;
        ``upto`` stops after block ``upto`` (inclusive)."""
        expected = tuple(self.spec.input_shape)
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model expects input (B, {', '.join(map(str, expected))}), got {x.shape}")
        layers = self.layers
        if upto is not None:
            layers = [layer for b in self.blocks[:upto + 1] for layer in b.layers]
        elif logits and self.ends_in_softmax():
            layers = layers[:-1]
        for layer in layers:
            if layer.training != self.training:
                raise L.StateError(f"{layer!r} is in {'train' if layer.training else 'eval'} mode "
                                   f"but the model is in {'train' if self.training else 'eval'} mode")
            x = layer.forward(x)
        self._ran = layers
        return x

    def backward(self, upstream, input_grad: bool = False):
        """Backpropagate through the layers used by the last forward call.

        Traversal stops early once every remaining layer is frozen, unless
        the gradient w.r.t. the input is requested.
        """
        ran = getattr(self, "_ran", None)
        if ran is None:
            raise L.StateError("backward called before forward")
        stop = 0
        if not input_grad:
            while stop < len(ran) and ran[stop].frozen:
                stop += 1
        g = upstream
        for i in range(len(ran) - 1, stop - 1, -1):
            g = ran[i].backward(g, need_input=input_grad or i > stop)
        return g if input_grad else None

    def named_params(self, trainable_only: bool = True):
        for i, block in enumerate(self.blocks):
            for layer in block.layers:
                if trainable_only and layer.frozen:
                    continue
                for role, p in layer.params.items():
                    yield f"{i}.{_role(layer, role)}", layer, role, p

    def weights(self):
        """Weight tensors subject to L2 (biases, BN and PReLU parameters excluded)."""
        return [layer.params["weight"] for layer in self.layers if "weight" in layer.params]

    def predict_proba(self, x, chunk: int = 1000):
        out = []
        for s in range(0, x.shape[0], chunk):
            y = self.forward(x[s:s + chunk])
            if not self.ends_in_softmax():
                y = L.softmax(y)
            out.append(y)
        return np.concatenate(out)

    def extract_features(self, x, tap: int | None = None):
        return extract_features(self, x, tap)

    def __repr__(self):
        lines = [f"Model(input={tuple(self.spec.input_shape)})"]
        for i, b in enumerate(self.blocks):
            lines.append(f"  [{i}] " + " -> ".join(map(repr, b.layers)) + f"  out={b.out_shape}")
        return "\n".join(lines)


def _role(layer, role):
    return "prelu_a" if isinstance(layer, L.Activation) else role


def rng_streams(seed: int):
    """Independent seed sequences: (init, dropout, sampler, augmentation)."""
    return np.random.SeedSequence(seed).spawn(4)


def build(spec: ModelSpec, seed: int | None = None) -> Model:
    """Build and initialize a model; the same seed gives bit-identical parameters."""
    seed = spec.train.seed if seed is None else seed
    init_rng, dropout_rng = (np.random.default_rng(s) for s in rng_streams(seed)[:2])
    blocks = infer_blocks(spec, dropout_rng, spec.train.dropout_convention)
    param_blocks = [i for i, b in enumerate(blocks) if any("weight" in l.params for l in b.layers)]
    last = param_blocks[-1] if param_blocks else -1
    for i, block in enumerate(blocks):
        init_block(block, spec.train, init_rng, is_output=(i == last))
    return Model(spec, blocks)


def _shard_losses(model, x, y, loss_cfg: LossConfig, use_logits: bool):
    if use_logits:
        out = model.forward(x, logits=True)
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -np.sum(y * logp, axis=1), np.argmax(out, axis=1)
    probs = model.forward(x)
    if not model.ends_in_softmax():
        probs = L.softmax(probs)
    return cross_entropy_per_sample(y, probs, loss_cfg), np.argmax(probs, axis=1)


def evaluate(model: Model, dataset, threads: int = 1, chunk: int = 1000):
    """Accuracy and mean loss in eval mode.

    The test set is processed in fixed chunks; with ``threads > 1`` chunks
    are spread over per-thread model copies, which gives results identical
    to the sequential pass.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    train = model.spec.train
    use_logits = train.loss == "softmax_ce"
    loss_cfg = LossConfig(epsilon=train.ce_epsilon, log_base=train.log_base)
    was_training = model.training
    model.eval()
    starts = list(range(0, n, chunk))

    def run(m, s):
        return _shard_losses(m, dataset.images[s:s + chunk], dataset.labels[s:s + chunk], loss_cfg, use_logits)

    try:
        if threads > 1 and len(starts) > 1:
            copies = [copy.deepcopy(model) for _ in range(min(threads, len(starts)))]
            with ThreadPoolExecutor(len(copies)) as pool:
                results = list(pool.map(lambda i: run(copies[i % len(copies)], starts[i]), range(len(starts))))
        else:
            results = [run(model, s) for s in starts]
    finally:
        model._set_mode(was_training)
    losses = np.concatenate([r[0] for r in results])
    preds = np.concatenate([r[1] for r in results])
    correct = int(np.sum(preds == np.argmax(dataset.labels, axis=1)))
    return correct / n, float(losses.mean())


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(labels, axis=1)))


def extract_features(model: Model, x, tap: int | None = None):
    """Per-sample flattened activations after block ``tap`` (default: penultimate)."""
    if tap is None:
        tap = len(model.blocks) - 2
    if not 0 <= tap < len(model.blocks):
        raise IndexError(f"tap block {tap} outside [0, {len(model.blocks) - 1}]")
    was_training = model.training
    model.eval()
    try:
        out = model.forward(x, upto=tap)
    finally:
        model._set_mode(was_training)
    return out.reshape(out.shape[0], -1)
