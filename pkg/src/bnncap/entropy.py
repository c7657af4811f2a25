"""Shannon entropy of binarized convolution filters and the capacity penalty.

A filter is one output-channel slice of a conv weight tensor.  Its weights
are summarised by their absolute sum ``S`` and signed sum ``delta``; the
share of positive weights is ``P = (S + delta) / 2S``.  On exact +-1 weights
``P`` is the empirical frequency of +1, so the binary entropy of ``P`` is the
information content of the filter.  Evaluated on the tanh surrogate the same
quantity is differentiable in the master weights, which is how the penalty
``lambda * |H_target - mean H|`` reaches the optimizer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quant import binarize, tanh_surrogate

__all__ = [
    "EntropyConfig", "FilterStats", "EntropyReport", "filter_stats", "filter_entropy",
    "filter_entropies", "mean_entropy", "information_loss", "entropy_penalty",
    "penalized_loss", "entropy_report", "binary_entropy",
]

# S below this counts as an all-zero filter: treated as perfectly balanced.
ZERO_SUM_EPS = 1e-12
# Probabilities are clamped away from 0 and 1 before taking logs.
PROB_EPS = 1e-12


@dataclass
class EntropyConfig:
    target: float = 0.97
    weight: float = 1e-4
    k: int = 5
    scope: frozenset | None = None  # layer names; None means every binary conv layer

    def __post_init__(self):
        if not 0.0 <= self.target <= 1.0:
            raise ValueError(f"target entropy must lie in [0, 1], got {self.target}")
        if self.weight < 0:
            raise ValueError(f"penalty weight must be >= 0, got {self.weight}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.scope is not None:
            self.scope = frozenset(self.scope)


@dataclass(frozen=True)
class FilterStats:
    S: float
    delta: float
    P: float
    N_prob: float
    n: int

    @property
    def H(self) -> float:
        return filter_entropy(self)


@dataclass
class EntropyReport:
    per_layer: dict[str, np.ndarray]
    mean: float
    h_loss: float
    step: int = 0
    view: str = "binary"

    def layer_means(self) -> dict[str, float]:
        return {name: float(h.mean()) for name, h in self.per_layer.items()}

    def rows(self):
        """(step, layer, filter_index, entropy) tuples for CSV output."""
        for name, h in self.per_layer.items():
            for i, v in enumerate(h):
                yield self.step, name, i, float(v)


def _sums_to_probs(S: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zero = S < ZERO_SUM_EPS
    denom = np.where(zero, 1.0, 2.0 * S)
    P = np.where(zero, 0.5, (S + delta) / denom)
    N = np.where(zero, 0.5, (S - delta) / denom)
    return P, N


def filter_stats(weights) -> FilterStats:
    w = np.ravel(weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64))
    if w.size < 1:
        raise ValueError("filter_stats: empty filter")
    S, delta = float(np.abs(w).sum()), float(w.sum())
    P, N = _sums_to_probs(np.array(S), np.array(delta))
    return FilterStats(S=S, delta=delta, P=float(P), N_prob=float(N), n=w.size)


def binary_entropy(p) -> np.ndarray:
    """-(p log2 p + q log2 q) with q = 1 - p and 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        hp = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
        hq = np.where(q > 0, -q * np.log2(np.where(q > 0, q, 1.0)), 0.0)
    return hp + hq


def filter_entropy(stats: FilterStats) -> float:
    P, N = stats.P, stats.N_prob
    h = 0.0
    for p in (P, N):
        if p > 0:
            h -= p * math.log2(p)
    return h


def filter_entropies(weights) -> np.ndarray:
    """Entropy of every output-channel filter of a conv weight tensor."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    w2 = w.reshape(w.shape[0], -1)
    P, N = _sums_to_probs(np.abs(w2).sum(axis=1), w2.sum(axis=1))
    # P + N == 1 by construction; evaluate via P for symmetry under sign flip
    hp = np.where(P > 0, -P * np.log2(np.where(P > 0, P, 1.0)), 0.0)
    hn = np.where(N > 0, -N * np.log2(np.where(N > 0, N, 1.0)), 0.0)
    return hp + hn


def _scoped_weights(model, config: EntropyConfig | None) -> dict[str, Tensor]:
    if isinstance(model, Mapping):
        weights = dict(model)
    elif hasattr(model, "binary_conv_weights"):
        weights = model.binary_conv_weights()
    else:
        weights = {f"filter_group{i}": w for i, w in enumerate(model)}
    scope = config.scope if config is not None else None
    if scope is not None:
        unknown = scope - weights.keys()
        if unknown:
            raise KeyError(f"entropy scope names unknown layers: {sorted(unknown)}")
        weights = {k: v for k, v in weights.items() if k in scope}
    if not weights:
        raise ValueError("entropy scope is empty: the model has no binary convolution layers")
    return weights


def _view(w, view: str, k: int) -> np.ndarray:
    if view == "binary":
        return binarize(w)
    if view == "surrogate":
        return tanh_surrogate(w, k)
    if view == "raw":
        return w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    raise ValueError(f"unknown weight view {view!r}; expected 'binary', 'surrogate' or 'raw'")


def mean_entropy(model, config: EntropyConfig | None = None, weight_view: str = "binary") -> float:
    """Uniform average of per-filter entropy over all in-scope filters.

    ``model`` may be a network exposing ``binary_conv_weights()``, a mapping of
    layer name to weights, or an iterable of weight tensors.
    """
    k = config.k if config is not None else 5
    total, count = 0.0, 0
    for w in _scoped_weights(model, config).values():
        h = filter_entropies(_view(w, weight_view, k))
        total += h.sum()
        count += h.size
    return float(total / count)


def information_loss(h_mean: float, target: float) -> float:
    return abs(target - h_mean)


def _surrogate_entropy_sum(master: Tensor, k: int) -> Tensor:
    f = master.shape[0]
    s = ad.tanh(ad.reshape(master, (f, -1)) * (10.0 ** k))
    S = ad.sum_(ad.abs_(s), axis=1)
    delta = ad.sum_(s, axis=1)
    zero = S.data < ZERO_SUM_EPS
    denom = ad.where(zero, 1.0, S * 2.0)
    P = ad.where(zero, 0.5, (S + delta) / denom)
    N = ad.where(zero, 0.5, (S - delta) / denom)
    P = ad.clip(P, PROB_EPS, 1.0 - PROB_EPS)
    N = ad.clip(N, PROB_EPS, 1.0 - PROB_EPS)
    h = (P * ad.log(P) + N * ad.log(N)) * (-1.0 / math.log(2.0))
    return ad.sum_(h)


def entropy_penalty(model, config: EntropyConfig) -> tuple[Tensor, Tensor]:
    """Differentiable (mean surrogate entropy, |target - mean|) over the scope."""
    weights = _scoped_weights(model, config)
    total, count = None, 0
    for w in weights.values():
        part = _surrogate_entropy_sum(w, config.k)
        total = part if total is None else total + part
        count += w.shape[0]
    h_mean = total * (1.0 / count)
    return h_mean, ad.abs_(h_mean - config.target)


def penalized_loss(task_loss: Tensor, model, config: EntropyConfig) -> Tensor:
    """task_loss + weight * |target - mean surrogate entropy|."""
    if config.weight < 0:
        raise ValueError(f"penalty weight must be >= 0, got {config.weight}")
    if config.weight == 0:
        return task_loss
    _, h_loss = entropy_penalty(model, config)
    return task_loss + h_loss * config.weight


def entropy_report(model, config: EntropyConfig | None = None, step: int = 0,
                   weight_view: str = "binary") -> EntropyReport:
    k = config.k if config is not None else 5
    per_layer = {name: filter_entropies(_view(w, weight_view, k))
                 for name, w in _scoped_weights(model, config).items()}
    allh = np.concatenate(list(per_layer.values()))
    h_mean = float(allh.mean())
    target = config.target if config is not None else 1.0
    return EntropyReport(per_layer=per_layer, mean=h_mean, h_loss=information_loss(h_mean, target),
                         step=step, view=weight_view)
