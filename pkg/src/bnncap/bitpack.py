"""Bit-packed binary weights and multiplication-free inference kernels.

Layout: bit 1 means weight +1, bit 0 means -1.  Bits fill 64-bit words
most-significant bit first; trailing pad bits are zero and never counted.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, im2col, no_grad
from .quant import binarize

__all__ = [
    "PackedFilter", "pack", "unpack", "pack_rows", "unpack_rows", "popcount",
    "xnor_dot", "xnor_dot_rows", "binary_conv_addsub", "pack_model",
    "packed_model_bytes", "WORD_BITS",
]

WORD_BITS = 64


@dataclass
class PackedFilter:
    """Packed +-1 weights: ``words`` is [rows, ceil(n/64)] uint64.

    A single filter has one row; a conv layer packs one row per output channel.
    """
    words: np.ndarray
    n: int
    shape: tuple

    @property
    def nbytes(self) -> int:
        return self.words.size * 8

    @property
    def rows(self) -> int:
        return self.words.shape[0]


def _check_binary(values: np.ndarray):
    if not np.all((values == 1.0) | (values == -1.0)):
        bad = values[(values != 1.0) & (values != -1.0)]
        raise ValueError(f"pack: expected only -1/+1 values, found {bad[:5]}")


def pack_rows(matrix) -> np.ndarray:
    """Pack each row of a +-1 matrix [R, n] into [R, ceil(n/64)] uint64 words."""
    m = np.asarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
    _check_binary(m)
    r, n = m.shape
    nwords = -(-n // WORD_BITS)
    bits = np.zeros((r, nwords * WORD_BITS), dtype=np.uint8)
    bits[:, :n] = m > 0
    packed = np.packbits(bits, axis=1, bitorder="big")
    return packed.view(">u8").astype(np.uint64).reshape(r, nwords)


def unpack_rows(words: np.ndarray, n: int) -> np.ndarray:
    w = np.ascontiguousarray(words, dtype=np.uint64)
    be = w.astype(">u8").view(np.uint8).reshape(w.shape[0], -1)
    bits = np.unpackbits(be, axis=1, bitorder="big")[:, :n]
    return np.where(bits == 1, 1.0, -1.0)


def pack(binary) -> PackedFilter:
    """Pack a +-1 tensor.  Rank >= 2 tensors pack one row per leading index."""
    arr = np.asarray(binary.data if isinstance(binary, Tensor) else binary, dtype=np.float64)
    if arr.ndim <= 1:
        flat = arr.reshape(1, -1)
    else:
        flat = arr.reshape(arr.shape[0], -1)
    return PackedFilter(words=pack_rows(flat), n=flat.shape[1], shape=arr.shape)


def unpack(packed: PackedFilter) -> np.ndarray:
    return unpack_rows(packed.words, packed.n).reshape(packed.shape)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def xnor_dot(a: PackedFilter, b: PackedFilter) -> int:
    """Sum of a_i * b_i for +-1 vectors, via n - 2 * popcount(a XOR b)."""
    if a.n != b.n or a.rows != b.rows:
        raise ValueError(f"xnor_dot: length mismatch {a.rows}x{a.n} vs {b.rows}x{b.n}")
    return int(xnor_dot_rows(a.words, b.words, a.n).sum())


def xnor_dot_rows(a_words: np.ndarray, b_words: np.ndarray, n: int) -> np.ndarray:
    """Row-wise dot products of packed vectors.

    Pad bits are zero in both operands, so their XOR contributes nothing.
    """
    diff = popcount(np.bitwise_xor(a_words, b_words)).sum(axis=-1, dtype=np.int64)
    return n - 2 * diff


def binary_conv_addsub(x: np.ndarray, packed: PackedFilter, stride: int, padding: int,
                       bits: int = 4, scale: float = 1.0, integer: bool = False) -> np.ndarray:
    """Convolve quantized activations with packed +-1 filters using only add/sub.

    ``x`` must lie on the ``bits``-bit lattice in [0, 1].  Activations are
    lifted to exact integers, each output accumulates the window values whose
    weight bit is set minus those whose bit is clear, and the integer result
    is rescaled once at the end.  ``integer=True`` returns the raw int64
    accumulator (activations in units of 1/(2**bits - 1)) instead.
    """
    x = np.asarray(x, dtype=np.float64)
    f, c, kh, kw = packed.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"binary_conv_addsub: input {x.shape} does not match filters {packed.shape}")
    levels = 2 ** bits - 1
    xi = np.rint(x * levels).astype(np.int64)
    if np.any(np.abs(xi - x * levels) > 1e-6):
        raise ValueError("binary_conv_addsub: input is not on the activation lattice")
    n = x.shape[0]
    cols, ho, wo = im2col(xi, kh, kw, stride, padding)
    plus = unpack_rows(packed.words, packed.n) > 0
    acc = np.empty((cols.shape[0], f), dtype=np.int64)
    for j in range(f):
        acc[:, j] = cols[:, plus[j]].sum(axis=1) - cols[:, ~plus[j]].sum(axis=1)
    acc = acc.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if integer:
        return np.ascontiguousarray(acc)
    out = acc / levels
    if scale != 1.0:
        out = out * scale
    return np.ascontiguousarray(out)


def pack_model(model):
    """Deep copy of ``model`` whose binary convs run the packed add/sub kernel."""
    if not model.config.binarize or not model.binary_conv_layers():
        raise ValueError("pack_model: model has no binarized layers")
    if any(layer.quant.per_layer_scale for layer in model.binary_conv_layers().values()):
        raise ValueError("pack_model: per-layer weight scaling is not supported by the packed path")
    packed = copy.deepcopy(model)
    for layer in packed.binary_conv_layers().values():
        layer.packed = pack(binarize(layer.weight))
    return packed.eval()


def packed_model_bytes(model) -> int:
    """Deployment payload: packed binary filters plus float32 full-precision parameters."""
    params = model.named_parameters()
    binary_names = model.binary_parameter_names() if model.config.binarize else set()
    total = 0
    for name, p in params.items():
        if name in binary_names:
            f = p.shape[0]
            total += f * (-(-(p.size // f) // WORD_BITS)) * 8
        else:
            total += 4 * p.size
    return total


def packed_predict(model, x: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Logits of a packed model, evaluated batch by batch without autodiff."""
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model(x[i:i + batch_size]).data)
    return np.concatenate(outs)
