"""Command line: ``bnncap {train,eval,inspect-entropy,pack,bench}``.

Exit codes: 0 success, 1 configuration error, 2 data or checkpoint error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .bitpack import pack_model, packed_model_bytes
from .data import DataFormatError, load_dataset, normalize, subset
from .entropy import entropy_report
from .experiment import ConfigError, parse_config, run_experiment
from .models import memory_report
from .training import NumericError, confidence_interval, evaluate, predict_logits

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
HIST_BINS = 64


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def cmd_train(args) -> int:
    text = ""
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
    overrides = {
        "seed": args.seed, "seeds": args.seeds, "data_dir": args.data_dir, "out_dir": args.out_dir,
        "he": args.he, "lambda": args.lam, "k": args.k, "epochs": args.epochs,
        "dataset": args.dataset, "arch": args.arch, "width": args.width,
        "batch_size": args.batch_size, "train_subset": args.train_subset,
        "val_subset": args.val_subset,
        "deterministic": True if args.deterministic else None,
        "arms": tuple(args.arm) if args.arm else None,
    }
    cfg = parse_config(text, overrides)
    log = None if args.quiet else (lambda s: print(s, flush=True))
    results = run_experiment(cfg, log=log)
    for arm in cfg.arms:
        accs = [r.val_acc for r in results if r.arm == arm]
        ents = [r.mean_entropy for r in results if r.arm == arm]
        line = f"{arm}: val_acc={np.mean(accs):.4f} mean_entropy={np.mean(ents):.4f}"
        if len(accs) > 1:
            line += f" ci95={confidence_interval(accs)['ci95']:.4f}"
        print(line)
    return EXIT_OK


def _load_eval_data(header: dict, args):
    norm = header.get("normalization") or {}
    dataset = args.dataset or norm.get("dataset")
    if not dataset:
        raise ConfigError("dataset unknown: pass --dataset")
    _, val = load_dataset(dataset, args.data_dir or None)
    val = subset(val, norm.get("val_subset") or None, seed=1)
    if "mean" in norm:
        val = normalize(val, norm["mean"], norm["std"])
    return val


def _check_compatible(model, data):
    cfg = model.config
    if data.class_count != cfg.num_classes:
        raise checkpoint.CheckpointError(
            f"checkpoint predicts {cfg.num_classes} classes but data has {data.class_count}")
    if data.images.shape[1] != cfg.in_channels:
        raise checkpoint.CheckpointError(
            f"checkpoint expects {cfg.in_channels} input channels, data has {data.images.shape[1]}")


def cmd_eval(args) -> int:
    loaded = checkpoint.load(args.checkpoint)
    val = _load_eval_data(loaded.header, args)
    _check_compatible(loaded.model, val)
    res = evaluate(loaded.model, val)
    print(f"top-1 accuracy: {100 * res['accuracy']:.2f}%")
    print(f"top1={float(res['accuracy'])!r}")
    return EXIT_OK


def cmd_inspect_entropy(args) -> int:
    loaded = checkpoint.load(args.checkpoint)
    model = loaded.model
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    if not model.config.binarize or not model.binary_conv_layers():
        print("warning: checkpoint has no binarized layers; empty entropy report")
        return EXIT_OK
    rep = entropy_report(model, checkpoint.entropy_config_from_header(loaded.header))
    for name, h in rep.layer_means().items():
        print(f"{name}: H={h:.6f} filters={rep.per_layer[name].size}")
    print(f"global mean entropy H={rep.mean:.3f}")
    print(f"mean_entropy={float(rep.mean)!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    edges = np.linspace(-1.0, 1.0, HIST_BINS + 1).tolist()
    views = {"binary": lambda w: np.where(w >= 0, 1.0, -1.0)}
    if not loaded.header.get("deployment"):
        views["real"] = lambda w: np.clip(w, -1.0, 1.0)
    for view, fn in views.items():
        rows = ["layer,bin,bin_left,bin_right,count"]
        for name, layer in model.binary_conv_layers().items():
            counts, _ = np.histogram(fn(layer.weight.data), bins=edges)
            rows.extend(f"{name},{i},{edges[i]!r},{edges[i + 1]!r},{c}" for i, c in enumerate(counts))
        path = out_dir / f"hist_{view}.csv"
        path.write_text("\n".join(rows) + "\n")
        print(f"wrote {path}")
    return EXIT_OK


def cmd_pack(args) -> int:
    loaded = checkpoint.load(args.checkpoint_in)
    model = loaded.model
    if not model.config.binarize:
        raise checkpoint.CheckpointError("cannot pack a full-precision model")
    h = loaded.header
    in_size = Path(args.checkpoint_in).stat().st_size
    out_size = checkpoint.save(model, None, args.checkpoint_out, deployment=True, epoch=h.get("epoch", 0),
                               metrics=h.get("metrics"), normalization=h.get("normalization"),
                               entropy=checkpoint.entropy_config_from_header(h))
    rep = memory_report(model)
    binary_fp32 = 4 * rep.binary_weights
    binary_packed = packed_model_bytes(model) - 4 * rep.full_precision_params
    print(f"input checkpoint:  {in_size} bytes")
    print(f"packed checkpoint: {out_size} bytes")
    print(f"file compression: {in_size / out_size:.2f}x")
    print(f"model footprint: fp32 {rep.fp_mb:.2f} MB -> binary {rep.binary_mb:.2f} MB "
          f"({rep.compression_ratio:.2f}x)")
    print(f"hidden-layer compression: {binary_fp32 / binary_packed:.2f}x")
    return EXIT_OK


def cmd_bench(args) -> int:
    loaded = checkpoint.load(args.checkpoint)
    model = loaded.model
    if not model.config.binarize:
        raise checkpoint.CheckpointError("bench needs a binarized model")
    if args.dataset or (loaded.header.get("normalization") or {}).get("dataset"):
        val = _load_eval_data(loaded.header, args)
        _check_compatible(model, val)
        x = val.images[:args.batch]
    else:
        c = model.config.in_channels
        x = np.random.default_rng(0).normal(size=(args.batch, c, 32, 32))
    packed = pack_model(model)
    timings = {}
    outputs = {}
    for label, m in (("dense-binary", model), ("packed add/sub", packed)):
        best = float("inf")
        for _ in range(args.repeats):
            t = time.perf_counter()
            outputs[label] = predict_logits(m, x)
            best = min(best, time.perf_counter() - t)
        timings[label] = best
        print(f"{label}: {len(x) / best:.1f} images/sec")
    agree = float((outputs["dense-binary"].argmax(1) == outputs["packed add/sub"].argmax(1)).mean())
    print(f"argmax agreement: {100 * agree:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnncap", description="Binary CNNs with an entropy-capacity penalty")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train full / binary / binary+penalty arms")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", type=int)
    t.add_argument("--data-dir")
    t.add_argument("--out-dir")
    t.add_argument("--dataset", choices=["cifar10", "mnist", "digits"])
    t.add_argument("--arch", choices=["preact_resnet18", "lenet"])
    t.add_argument("--width", type=float)
    t.add_argument("--arm", action="append", choices=["full", "binary", "penalty"])
    t.add_argument("--he", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--train-subset", type=int)
    t.add_argument("--val-subset", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data-dir")
    e.add_argument("--dataset", choices=["cifar10", "mnist", "digits"])
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect-entropy", help="per-layer filter entropy and weight histograms")
    i.add_argument("checkpoint")
    i.add_argument("--out-dir")
    i.set_defaults(func=cmd_inspect_entropy)

    k = sub.add_parser("pack", help="convert a training checkpoint to packed deployment form")
    k.add_argument("checkpoint_in")
    k.add_argument("checkpoint_out")
    k.set_defaults(func=cmd_pack)

    b = sub.add_parser("bench", help="time dense vs packed binary inference")
    b.add_argument("checkpoint")
    b.add_argument("--data-dir")
    b.add_argument("--dataset", choices=["cifar10", "mnist", "digits"])
    b.add_argument("--batch", type=int, default=64)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except NumericError as exc:
        _err(str(exc))
        return EXIT_NUMERIC
    except (checkpoint.CheckpointError, DataFormatError, FileNotFoundError, OSError) as exc:
        _err(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
