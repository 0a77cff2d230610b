"""Minibatch training loop, fine-tuning and metrics output."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .data import BatchSampler, Dataset, FancyPCA, add_noise, flip_h, flip_v
from .loss import LossConfig, cross_entropy, l2_penalty, softmax_cross_entropy_with_logits
from .model import Model, evaluate, rng_streams
from .optim import DecaySchedule, OptimizerState

log = logging.getLogger(__name__)

CSV_HEADER = ["iter", "loss", "train_acc", "test_acc", "eta"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration, value):
        self.iteration = iteration
        super().__init__(f"non-finite loss {value} at iteration {iteration}")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    # iteration -> (train_acc, test_acc); test_acc is None without a test set
    accuracy: dict = field(default_factory=dict)

    @property
    def final_test_accuracy(self):
        if not self.accuracy:
            return None
        return self.accuracy[max(self.accuracy)][1]

    def rows(self):
        """CSV rows; the iteration-0 row only appears for zero-iteration runs."""
        its = range(1, len(self.losses) + 1) if self.losses else [0]
        for it in its:
            train_acc, test_acc = self.accuracy.get(it, (None, None))
            loss = repr(self.losses[it - 1]) if it else ""
            eta = repr(self.etas[it - 1]) if it else ""
            yield [str(it), loss, _fmt(train_acc), _fmt(test_acc), eta]

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_HEADER)
            w.writerows(self.rows())


def _fmt(v):
    return "" if v is None else repr(float(v))


def _augmenter(names, train: Dataset, rng):
    """Per-batch augmentation from names like ``flip_h`` or ``add_noise:0.1``."""
    ops = []
    for spec in names:
        name, _, arg = spec.partition(":")
        if name in ("flip_h", "flip_v"):
            fn = flip_h if name == "flip_h" else flip_v
            ops.append(lambda img, fn=fn: fn(img) if rng.random() < 0.5 else img)
        elif name == "add_noise":
            sigma = float(arg or 0.1)
            ops.append(lambda img, s=sigma: add_noise(img, s, rng))
        elif name == "fancy_pca":
            pca = FancyPCA(float(arg or 0.1)).fit(train.images[:1000])
            ops.append(lambda img, p=pca: p(img, rng))
        else:
            raise ValueError(f"unsupported training augmentation {spec!r}")

    def apply(batch):
        if not ops:
            return batch
        out = batch.copy()
        for i in range(out.shape[0]):
            for op in ops:
                out[i] = op(out[i])
        return out

    return apply


def train_step(model: Model, xb, yb, optimizer: OptimizerState, eta: float):
    """One forward/backward/update; returns the loss including the L2 term."""
    cfg = model.spec.train
    model.train()
    use_logits = cfg.loss == "softmax_ce"
    out = model.forward(xb, logits=use_logits)
    if use_logits:
        loss, grad = softmax_cross_entropy_with_logits(yb, out, cfg.reduction)
    else:
        probs = out if model.ends_in_softmax() else L.softmax(out)
        loss, grad = cross_entropy(yb, probs, LossConfig(cfg.ce_epsilon, cfg.log_base, cfg.lam, cfg.reduction))
        if not model.ends_in_softmax():
            grad = probs * (grad - np.sum(grad * probs, axis=1, keepdims=True))
    model.backward(grad)
    named = list(model.named_params())
    if cfg.lam > 0:
        weights = [(layer, p) for _, layer, role, p in named if role == "weight"]
        penalty, pgrads = l2_penalty([p for _, p in weights], cfg.lam)
        for (layer, _), pg in zip(weights, pgrads):
            layer.grads["weight"] = layer.grads["weight"] + pg
        frozen_w = [layer.params["weight"] for layer in model.layers if layer.frozen and "weight" in layer.params]
        loss += l2_penalty(frozen_w, cfg.lam)[0]
        loss += penalty
    optimizer.step(((name, p, layer.grads[role]) for name, layer, role, p in named), eta=eta)
    for layer in model.layers:
        if not layer.frozen:
            layer.after_update()
    return loss


def make_optimizer(cfg) -> OptimizerState:
    return OptimizerState(kind=cfg.optimizer, eta=cfg.eta, alpha=cfg.alpha, gamma=cfg.gamma,
                          epsilon=cfg.opt_epsilon)


def train(model: Model, train_set: Dataset, test_set: Dataset | None = None,
          iters: int | None = None, threads: int = 1, progress=None) -> TrainReport:
    """Run the configured number of iterations of minibatch training.

    Accuracy is recorded every ``eval_every`` iterations and after the last
    one: train accuracy on the first ``train_eval_samples`` training images,
    test accuracy on the whole test set.
    """
    cfg = model.spec.train
    iters = cfg.iters if iters is None else iters
    if iters < 0:
        raise ValueError("iteration count must be non-negative")
    sampler_seed, aug_seed = rng_streams(cfg.seed)[2:]
    sampler = BatchSampler(len(train_set), cfg.batch, seed=sampler_seed, mode=cfg.sampling)
    augment = _augmenter(cfg.augment, train_set, np.random.default_rng(aug_seed))
    schedule = DecaySchedule(cfg.eta, cfg.decay)
    optimizer = make_optimizer(cfg)
    report = TrainReport()
    probe = train_set.subset(slice(0, min(cfg.train_eval_samples, len(train_set))))

    def record(it):
        train_acc, _ = evaluate(model, probe, threads=threads)
        test_acc = evaluate(model, test_set, threads=threads)[0] if test_set is not None else None
        report.accuracy[it] = (train_acc, test_acc)
        log.info("iter %d  loss %.5f  train %.4f  test %s", it, report.losses[-1] if report.losses else float("nan"),
                 train_acc, "-" if test_acc is None else f"{test_acc:.4f}")

    for k in range(iters):
        t0 = time.perf_counter()
        idx = sampler.next_indices()
        xb = augment(train_set.images[idx])
        yb = train_set.labels[idx]
        eta = schedule.eta(k)
        loss = train_step(model, xb, yb, optimizer, eta)
        if not math.isfinite(loss):
            raise TrainingDiverged(k + 1, loss)
        report.losses.append(loss)
        report.etas.append(eta)
        report.seconds.append(time.perf_counter() - t0)
        it = k + 1
        if (cfg.eval_every and it % cfg.eval_every == 0) or it == iters:
            record(it)
        if progress is not None:
            progress(it, loss)
    if iters == 0:
        record(0)
    model.eval()
    return report


def fine_tune(model: Model, freeze_below: int, train_set: Dataset, test_set: Dataset | None = None,
              iters: int | None = None, threads: int = 1) -> TrainReport:
    """Freeze blocks ``< freeze_below`` and train the rest."""
    model.set_frozen(freeze_below)
    return train(model, train_set, test_set, iters=iters, threads=threads)
