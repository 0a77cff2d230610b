"""Command-line entry point: ``tinydl <subcommand> [--flags]``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on missing
files and data/format errors. All inputs are validated before any output
file is opened.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .data import DataFormatError, Dataset, Preprocessor, find_split, load_idx
from .model import BuildError, build, evaluate, extract_features, param_count
from .training import fine_tune, train

log = logging.getLogger("tinydl")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser():
    p = _Parser(prog="tinydl", description="Train and probe small MNIST networks.", allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True, data=True):
        if config:
            sp.add_argument("--config", required=True, help="model/training config file")
        if data:
            sp.add_argument("--data-dir", required=True, help="directory with the MNIST IDX files (.gz ok)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1, help="BLAS/eval threads (1 = bit-reproducible)")
        sp.add_argument("--verbose", action="store_true")

    t = sub.add_parser("train", help="train a model, write metrics CSV and checkpoint", allow_abbrev=False)
    common(t)
    t.add_argument("--iters", type=int, help="override the iteration count")
    t.add_argument("--metrics-out", required=True)
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--checkpoint-in", help="start from these parameters (fine-tuning)")
    t.add_argument("--replace", default="", help="comma-separated block indices to re-initialize on load")
    t.add_argument("--freeze-below", type=int, default=0, help="freeze blocks with index below this")
    t.add_argument("--checkpoint-dtype", choices=("f64", "f32"), default="f64")
    t.add_argument("--dropout-convention", choices=("inverted", "classic"))

    e = sub.add_parser("eval", help="accuracy and mean loss on the test split", allow_abbrev=False)
    common(e)
    e.add_argument("--checkpoint-in", required=True)
    e.add_argument("--dropout-convention", choices=("inverted", "classic"))

    c = sub.add_parser("count-params", help="per-block parameter table", allow_abbrev=False)
    common(c, data=False)

    x = sub.add_parser("extract", help="write per-sample feature vectors as CSV", allow_abbrev=False)
    common(x)
    x.add_argument("--checkpoint-in", required=True)
    x.add_argument("--tap", type=int, help="block index to tap (default: penultimate)")
    x.add_argument("--split", choices=("train", "test"), default="test")
    x.add_argument("--limit", type=int, help="only the first N samples")
    x.add_argument("--output", required=True)

    a = sub.add_parser("attack", help="robustness CSV for gradient perturbations", allow_abbrev=False)
    common(a)
    a.add_argument("--checkpoint-in", required=True)
    a.add_argument("--epsilons", default="0,0.01,0.02,0.04,0.08")
    a.add_argument("--mode", choices=("scaled", "sign"), default="scaled")
    a.add_argument("--target-class", type=int)
    a.add_argument("--limit", type=int, default=1000, help="number of test images")
    a.add_argument("--output", required=True)

    i = sub.add_parser("inspect-data", help="print dataset shapes and statistics", allow_abbrev=False)
    common(i, config=False)
    return p


def _require_file(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(path)


def _spec(args):
    _require_file(args.config)
    spec = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dropout_convention", None):
        overrides["dropout_convention"] = args.dropout_convention
    if getattr(args, "iters", None) is not None:
        if args.iters < 0:
            raise UsageError("--iters must be non-negative")
        overrides["iters"] = args.iters
    return spec.with_train(**overrides) if overrides else spec


def _load_split(data_dir, split) -> Dataset:
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(data_dir)
    images, labels = find_split(data_dir, split)
    return load_idx(images, labels, split)


def _datasets(args, spec, need_train=True):
    test = _load_split(args.data_dir, "test")
    train_set = _load_split(args.data_dir, "train") if need_train or spec.train.preprocess != "none" else None
    if spec.train.preprocess != "none":
        pre = Preprocessor(spec.train.preprocess).fit(train_set)
        train_set, test = pre.transform(train_set), pre.transform(test)
    return train_set, test


def _check_outputs(*paths):
    for path in paths:
        parent = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(parent):
            raise UsageError(f"output directory does not exist: {parent}")


def _model_from_checkpoint(args, spec, replace=()):
    _require_file(args.checkpoint_in)
    return load_checkpoint(args.checkpoint_in, spec, replace=replace, seed=spec.train.seed)


def cmd_train(args):
    spec = _spec(args)
    replace = [int(r) for r in args.replace.split(",") if r.strip()]
    _check_outputs(args.metrics_out, args.checkpoint_out)
    if args.checkpoint_in:
        _require_file(args.checkpoint_in)
    train_set, test = _datasets(args, spec)
    if args.checkpoint_in:
        model = _model_from_checkpoint(args, spec, replace)
    else:
        if replace or args.freeze_below:
            raise UsageError("--replace and --freeze-below need --checkpoint-in")
        model = build(spec)
    report = fine_tune(model, args.freeze_below, train_set, test, threads=args.threads)
    report.write_csv(args.metrics_out)
    save_checkpoint(model, args.checkpoint_out, args.checkpoint_dtype)
    print(f"test_accuracy={report.final_test_accuracy!r}")
    return 0


def cmd_eval(args):
    spec = _spec(args)
    _require_file(args.checkpoint_in)
    _, test = _datasets(args, spec, need_train=False)
    model = _model_from_checkpoint(args, spec)
    acc, loss = evaluate(model, test, threads=args.threads)
    print(f"accuracy={acc!r}")
    print(f"loss={loss!r}")
    return 0


def cmd_count(args):
    spec = _spec(args)
    counts, total = param_count(spec)
    print(f"{'block':>5}  {'layer':<52} {'params':>10}")
    for i, (decl, n) in enumerate(zip(spec.layers, counts)):
        print(f"{i:>5}  {decl.describe().split(' (line')[0]:<52} {n:>10}")
    print(f"total={total}")
    return 0


def cmd_extract(args):
    spec = _spec(args)
    _require_file(args.checkpoint_in)
    _check_outputs(args.output)
    train_set, test = _datasets(args, spec, need_train=args.split == "train")
    ds = train_set if args.split == "train" else test
    if args.limit is not None:
        ds = ds.subset(slice(0, args.limit))
    model = _model_from_checkpoint(args, spec)
    if args.tap is not None and not 0 <= args.tap < len(model.blocks):
        raise UsageError(f"--tap {args.tap} outside [0, {len(model.blocks) - 1}]")
    chunks = [extract_features(model, ds.images[s:s + 1000], args.tap) for s in range(0, len(ds), 1000)]
    feats = np.concatenate(chunks)
    labels = np.argmax(ds.labels, axis=1)
    with open(args.output, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label"] + [f"f{j}" for j in range(feats.shape[1])])
        for n, (lab, row) in enumerate(zip(labels, feats)):
            w.writerow([n, int(lab)] + [repr(float(v)) for v in row])
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {args.output}")
    return 0


def cmd_attack(args):
    from .adversarial import robustness_report, write_report

    spec = _spec(args)
    try:
        epsilons = [float(e) for e in args.epsilons.split(",") if e.strip()]
    except ValueError:
        raise UsageError(f"bad --epsilons {args.epsilons!r}") from None
    if not epsilons or any(not 0 <= e <= 1 for e in epsilons):
        raise UsageError("--epsilons must be values in [0, 1]")
    _require_file(args.checkpoint_in)
    _check_outputs(args.output)
    if spec.train.preprocess != "none":
        raise UsageError("attacks assume raw [0, 1] pixel inputs (config uses preprocessing)")
    _, test = _datasets(args, spec, need_train=False)
    test = test.subset(slice(0, args.limit))
    model = _model_from_checkpoint(args, spec)
    rows = robustness_report(model, test, epsilons, mode=args.mode, target_class=args.target_class)
    write_report(rows, args.output)
    for eps, acc in rows:
        print(f"epsilon={eps!r} adv_accuracy={acc!r}")
    return 0


def cmd_inspect(args):
    for split in ("train", "test"):
        ds = _load_split(args.data_dir, split)
        counts = np.bincount(np.argmax(ds.labels, axis=1), minlength=10)
        print(f"{split}: images {ds.images.shape} labels {ds.labels.shape}")
        print(f"  pixel mean {ds.images.mean():.6f} std {ds.images.std():.6f} "
              f"min {ds.images.min():.1f} max {ds.images.max():.1f}")
        print("  class counts " + " ".join(str(int(c)) for c in counts))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count,
    "extract": cmd_extract,
    "attack": cmd_attack,
    "inspect-data": cmd_inspect,
}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads < 1:
        print("tinydl: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError, BuildError) as exc:
        print(f"tinydl {args.command}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"tinydl {args.command}: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (DataFormatError, CheckpointError) as exc:
        print(f"tinydl {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
