"""SGD training loop with step LR decay and the optional entropy penalty."""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset, augment, iterate_batches
from .entropy import EntropyConfig, entropy_penalty, mean_entropy

__all__ = [
    "TrainConfig", "EpochMetrics", "SGD", "NumericError", "lr_schedule", "train_epoch",
    "evaluate", "predict_logits", "confidence_interval", "deterministic_mode",
]


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple = (0.5, 0.75)
    entropy: EntropyConfig | None = None
    seed: int = 0
    deterministic: bool = True
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.entropy, dict):
            self.entropy = EntropyConfig(**self.entropy)
        self.milestones = tuple(self.milestones)


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    lr: float
    train_loss: float
    ce_loss: float
    h_loss: float
    mean_entropy: float
    train_acc: float
    seconds: float
    val_acc: float = float("nan")
    val_loss: float = float("nan")


def lr_schedule(epoch: int, total: int, lr0: float, milestones=(0.5, 0.75)) -> float:
    """``lr0`` divided by 10 at each milestone fraction of ``total`` epochs."""
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    drops = sum(epoch >= m * total for m in milestones)
    return lr0 / 10 ** drops


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


class SGD:
    """Nesterov SGD with coupled weight decay.

    g' = g + wd*w;  v <- mu*v + g';  w <- w - lr*(g' + mu*v).
    Parameters named in ``clamp`` are clipped to [-1, 1] after each step.
    """

    def __init__(self, params: dict, lr=0.1, momentum=0.9, weight_decay=1e-4, clamp=()):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.clamp = set(clamp)
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.step_count = 0

    def step(self, grads: dict | None = None):
        for name, p in self.params.items():
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            g = g + self.weight_decay * p.data if self.weight_decay else g
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * (g + self.momentum * v) if self.momentum else self.lr * g
            if name in self.clamp:
                np.clip(p.data, -1.0, 1.0, out=p.data)
        self.step_count += 1

    def state_dict(self) -> dict:
        return {"step": self.step_count, "velocity": {k: v.copy() for k, v in self.velocity.items()}}

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step"])
        for k, v in state["velocity"].items():
            self.velocity[k][...] = v


def make_optimizer(model, config: TrainConfig) -> SGD:
    clamp = model.binary_parameter_names() if model.config.binarize else ()
    return SGD(model.named_parameters(), config.lr0, config.momentum, config.weight_decay, clamp)


def train_epoch(model, data: Dataset, config: TrainConfig, optimizer: SGD, epoch: int,
                rng: np.random.Generator) -> EpochMetrics:
    if len(data) == 0:
        raise ValueError("train_epoch: empty dataset")
    if data.class_count != model.config.num_classes:
        raise ValueError(f"dataset has {data.class_count} classes, model {model.config.num_classes}")
    optimizer.lr = lr_schedule(epoch, config.epochs, config.lr0, config.milestones)
    ent = config.entropy
    use_penalty = ent is not None and ent.weight > 0
    model.train()
    start = time.perf_counter()
    seen = correct = 0
    ce_sum = h_sum = loss_sum = 0.0
    for images, labels in iterate_batches(data, config.batch_size, rng):
        if config.augment:
            images = augment(images, "train", rng)
        logits = model(images)
        ce = ad.softmax_cross_entropy(logits, labels)
        loss = ce
        h_loss = 0.0
        if use_penalty:
            _, h = entropy_penalty(model, ent)
            loss = ce + h * ent.weight
            h_loss = h.item()
        if not np.isfinite(loss.item()):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        ad.backward(loss)
        optimizer.step()
        b = len(labels)
        seen += b
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        ce_sum += ce.item() * b
        h_sum += h_loss * b
        loss_sum += loss.item() * b
    seconds = time.perf_counter() - start
    return EpochMetrics(
        epoch=epoch, step=optimizer.step_count, lr=optimizer.lr,
        train_loss=loss_sum / seen, ce_loss=ce_sum / seen, h_loss=h_sum / seen,
        mean_entropy=mean_entropy(model, ent), train_acc=correct / seen, seconds=seconds)


def predict_logits(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i:i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def evaluate(model, data: Dataset, batch_size: int = 256) -> dict:
    """Top-1 accuracy and mean cross-entropy; leaves weights untouched."""
    was_training = model.training
    logits = predict_logits(model, data.images, batch_size)
    model.train(was_training)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(data)), data.labels].mean()) if len(data) else float("nan")
    acc = float((logits.argmax(axis=1) == data.labels).mean()) if len(data) else float("nan")
    return {"accuracy": acc, "loss": loss}


def confidence_interval(values) -> dict:
    """Mean and half-width 1.96 * standard error (sample std, ddof=1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("confidence_interval needs at least 2 runs")
    return {"mean": float(v.mean()), "ci95": float(1.96 * v.std(ddof=1) / np.sqrt(v.size))}
