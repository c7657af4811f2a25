"""Run configuration and the full / binary / binary+penalty experiment arms."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import Dataset, channel_stats, load_dataset, normalize, subset
from .entropy import EntropyConfig, entropy_report
from .models import ModelConfig, build_model
from .quant import QuantConfig
from .training import (TrainConfig, confidence_interval, deterministic_mode, evaluate,
                       make_optimizer, train_epoch)

__all__ = ["RunConfig", "ConfigError", "RunResult", "ARMS", "METRICS_HEADER", "parse_config",
           "prepare_data", "run_arm", "run_experiment", "summarize"]

ARMS = ("full", "binary", "penalty")
METRICS_HEADER = ["epoch", "step", "lr", "train_loss", "ce_loss", "h_loss", "mean_entropy",
                  "train_acc", "val_acc", "epoch_seconds"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every setting of a training run.

    Config files are ``key = value`` lines (``#`` comments allowed); keys are
    the field names below, except ``lam`` which is spelled ``lambda``.
    """
    dataset: str = "cifar10"          # cifar10 | mnist | digits
    data_dir: str = ""
    out_dir: str = "runs"
    arch: str = "preact_resnet18"     # preact_resnet18 | lenet
    width: float = 0.25
    arms: tuple = ARMS
    seed: int = 0
    seeds: int = 1
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple = (0.5, 0.75)
    he: float = 0.97
    lam: float = 1e-4
    k: int = 5
    activation_bits: int = 4
    ste_clip: float = 1.0
    per_layer_scale: bool = False
    augment: bool = True
    train_subset: int = 0             # 0 keeps the whole split
    val_subset: int = 0
    deterministic: bool = True
    checkpoint_every: int = 0         # 0 writes only the final checkpoint
    entropy_report_every: int = 0     # 0 disables per-filter entropy snapshots

    def __post_init__(self):
        if isinstance(self.arms, str):
            self.arms = tuple(a.strip() for a in self.arms.split(",") if a.strip())
        bad = [a for a in self.arms if a not in ARMS]
        if bad or not self.arms:
            raise ConfigError(f"arms must be drawn from {ARMS}, got {self.arms}")
        if self.seeds < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("seeds, epochs and batch_size must be positive")

    def resolved(self) -> str:
        lines = []
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, ftype, raw: str):
    raw = raw.strip()
    try:
        if ftype in ("bool", bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("tuple", tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(float(x) for x in items) if name == "milestones" else tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None


def parse_config(text: str = "", overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from key-value text plus already-typed overrides."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    known = {("lambda" if f.name == "lam" else f.name): f for f in fields(RunConfig)}
    values = {}
    for key, raw in parser["run"].items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        f = known[key]
        values[f.name] = _coerce(f.name, f.type, raw)
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        name = "lam" if key == "lambda" else key
        if name not in {f.name for f in fields(RunConfig)}:
            raise ConfigError(f"unknown override {key!r}")
        values[name] = v
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def model_config(cfg: RunConfig, arm: str, num_classes: int, in_channels: int) -> ModelConfig:
    quant = QuantConfig(activation_bits=cfg.activation_bits, k=cfg.k, ste_clip=cfg.ste_clip,
                        per_layer_scale=cfg.per_layer_scale)
    try:
        return ModelConfig(arch=cfg.arch, num_classes=num_classes, width=cfg.width,
                           binarize=arm != "full", in_channels=in_channels, quant=quant)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: RunConfig, arm: str, seed: int) -> TrainConfig:
    ent = EntropyConfig(target=cfg.he, weight=cfg.lam, k=cfg.k) if arm == "penalty" else None
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr0=cfg.lr,
                       momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       milestones=cfg.milestones, entropy=ent, seed=seed,
                       deterministic=cfg.deterministic, augment=cfg.augment)


def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset, dict]:
    """Load, subset and normalize with training-split channel statistics."""
    train, val = load_dataset(cfg.dataset, cfg.data_dir or None)
    train = subset(train, cfg.train_subset or None, seed=0)
    val = subset(val, cfg.val_subset or None, seed=1)
    mean, std = channel_stats(train)
    norm = {"mean": mean.tolist(), "std": std.tolist(), "dataset": cfg.dataset,
            "train_subset": cfg.train_subset, "val_subset": cfg.val_subset}
    return normalize(train, mean, std), normalize(val, mean, std), norm


@dataclass
class RunResult:
    arm: str
    seed: int
    val_acc: float
    mean_entropy: float
    epoch_seconds: list
    history: list
    checkpoint: Path | None = None


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def run_arm(cfg: RunConfig, arm: str, seed: int, train: Dataset, val: Dataset,
            out_dir: Path | None, normalization: dict | None = None, log=None) -> RunResult:
    """Train one arm from one seed; writes metrics, timings and checkpoints to ``out_dir``."""
    mcfg = model_config(cfg, arm, train.class_count, train.images.shape[1])
    tcfg = train_config(cfg, arm, seed)
    model = build_model(mcfg, seed=seed)
    opt = make_optimizer(model, tcfg)
    rng = np.random.default_rng(seed)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.resolved").write_text(
            dataclasses.replace(cfg, arms=(arm,), seed=seed, seeds=1).resolved())
    metrics_buf = io.StringIO()
    writer = csv.writer(metrics_buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    timing_rows = ["epoch,epoch_seconds\n"]
    entropy_rows = ["epoch,layer,filter,entropy\n"]
    history, ckpt_path = [], None
    with deterministic_mode(cfg.deterministic):
        for epoch in range(cfg.epochs):
            m = train_epoch(model, train, tcfg, opt, epoch, rng)
            ev = evaluate(model, val)
            m.val_acc, m.val_loss = ev["accuracy"], ev["loss"]
            history.append(m)
            seconds = 0.0 if cfg.deterministic else m.seconds
            writer.writerow([m.epoch, m.step, _fmt(m.lr), _fmt(m.train_loss), _fmt(m.ce_loss),
                             _fmt(m.h_loss), _fmt(m.mean_entropy), _fmt(m.train_acc),
                             _fmt(m.val_acc), _fmt(seconds)])
            timing_rows.append(f"{epoch},{m.seconds!r}\n")
            if cfg.entropy_report_every and (epoch + 1) % cfg.entropy_report_every == 0:
                rep = entropy_report(model, tcfg.entropy, step=epoch)
                entropy_rows.extend(f"{s},{name},{i},{h!r}\n" for s, name, i, h in rep.rows())
            if log:
                log(f"[{arm} seed={seed}] epoch {epoch + 1}/{cfg.epochs} lr={m.lr:g} "
                    f"loss={m.train_loss:.4f} H={m.mean_entropy:.4f} "
                    f"train_acc={m.train_acc:.4f} val_acc={m.val_acc:.4f} ({m.seconds:.1f}s)")
            if out_dir is not None:
                (out_dir / "metrics.csv").write_text(metrics_buf.getvalue())
                (out_dir / "timings.csv").write_text("".join(timing_rows))
                if cfg.entropy_report_every:
                    (out_dir / "entropy.csv").write_text("".join(entropy_rows))
                last = epoch == cfg.epochs - 1
                if last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                    ckpt_path = out_dir / ("final.bnnc" if last else f"epoch{epoch + 1}.bnnc")
                    checkpoint.save(model, opt, ckpt_path, epoch=epoch + 1,
                                    metrics={"val_acc": m.val_acc, "mean_entropy": m.mean_entropy},
                                    entropy=tcfg.entropy, normalization=normalization)
    final = history[-1]
    return RunResult(arm, seed, final.val_acc, final.mean_entropy,
                     [h.seconds for h in history], history, ckpt_path)


def run_experiment(cfg: RunConfig, log=None, data=None) -> list[RunResult]:
    train, val, norm = data if data is not None else prepare_data(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.resolved())
    results = []
    for arm in cfg.arms:
        for s in range(cfg.seeds):
            seed = cfg.seed + s
            results.append(run_arm(cfg, arm, seed, train, val, out / arm / f"seed{seed}", norm, log))
    (out / "summary.csv").write_text(summarize(results))
    return results


def summarize(results: list[RunResult]) -> str:
    lines = ["arm,runs,val_acc_mean,val_acc_ci95,mean_entropy_mean,epoch_seconds_mean"]
    for arm in dict.fromkeys(r.arm for r in results):
        rs = [r for r in results if r.arm == arm]
        accs = [r.val_acc for r in rs]
        ci = confidence_interval(accs)["ci95"] if len(rs) > 1 else float("nan")
        cols = [np.mean(accs), ci, np.mean([r.mean_entropy for r in rs]),
                np.mean([np.mean(r.epoch_seconds) for r in rs])]
        lines.append(f"{arm},{len(rs)}," + ",".join(_fmt(v) for v in cols))
    return "\n".join(lines) + "\n"
