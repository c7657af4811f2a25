"""Weight binarization, its smooth tanh stand-in, and activation quantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, record

__all__ = [
    "QuantConfig", "LayerWeights", "binarize", "tanh_surrogate", "ste_grad",
    "quantize_activation", "binarize_ste", "quantize_activation_ste",
]


@dataclass
class QuantConfig:
    activation_bits: int = 4
    k: int = 5
    ste_clip: float = 1.0
    per_layer_scale: bool = False

    def __post_init__(self):
        if self.activation_bits < 1:
            raise ValueError(f"activation_bits must be >= 1, got {self.activation_bits}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.ste_clip <= 0:
            raise ValueError(f"ste_clip must be positive, got {self.ste_clip}")


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def binarize(master) -> np.ndarray:
    """+1 where ``master >= 0``, -1 elsewhere (so zero maps to +1)."""
    w = _values(master)
    if np.isnan(w).any():
        raise ValueError("binarize: NaN in master weights")
    return np.where(w >= 0, 1.0, -1.0)


def tanh_surrogate(master, k: int = 5) -> np.ndarray:
    """tanh(10**k * w), a differentiable stand-in for :func:`binarize`."""
    return np.tanh(10.0 ** k * _values(master))


def ste_grad(upstream, master, clip: float = 1.0) -> np.ndarray:
    """Hard-tanh straight-through rule: pass ``upstream`` where |master| <= clip."""
    up, w = _values(upstream), _values(master)
    if up.shape != w.shape:
        raise ValueError(f"ste_grad: upstream {up.shape} vs master {w.shape}")
    return np.where(np.abs(w) <= clip, up, 0.0)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    # inputs are clamped to [0, levels], where half-up equals half-away-from-zero
    return np.floor(x + 0.5)


def quantize_activation(x, bits: int = 4) -> np.ndarray:
    """Uniform quantization of clamp(x, 0, 1) onto 2**bits levels."""
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    levels = 2 ** bits - 1
    return _round_half_up(levels * np.clip(_values(x), 0.0, 1.0)) / levels


def binarize_ste(master: Tensor, clip: float = 1.0, scale: bool = False) -> Tensor:
    """Forward: sign weights (optionally times mean |W|); backward: clipped STE."""
    w = binarize(master)
    alpha = float(np.abs(master.data).mean()) if scale else 1.0
    out = w * alpha if scale else w
    return record(out, (master,), lambda g: (ste_grad(g * alpha, master.data, clip),), "binarize_ste")


def quantize_activation_ste(x: Tensor, bits: int = 4) -> Tensor:
    """Forward: :func:`quantize_activation`; backward: identity inside [0, 1]."""
    x = as_tensor(x)
    inside = (x.data >= 0.0) & (x.data <= 1.0)
    return record(quantize_activation(x.data, bits), (x,), lambda g: (g * inside,), "quantize_activation")


class LayerWeights:
    """Master weights of one binarized layer plus their derived views."""

    def __init__(self, master: Tensor, k: int = 5):
        self.master = master
        self.k = k

    @property
    def binary(self) -> np.ndarray:
        return binarize(self.master)

    @property
    def surrogate(self) -> np.ndarray:
        return tanh_surrogate(self.master, self.k)
