"""Binary checkpoint format.

Layout, little-endian throughout::

    b"BNNC" | u32 version | u32 header_len | header (UTF-8 JSON)
    u32 record_count
    records: u16 name_len | name | u8 dtype | u8 rank | u32 dims[rank] | payload
    u32 CRC-32 of every preceding byte

dtype codes: 0 = float64 raw, 1 = packed binary (one row of u64 words per
leading index, MSB-first, bit 1 = +1), 2 = float32 raw.  Training checkpoints
keep float64 master weights and optimizer velocities.  Deployment
checkpoints keep binary conv weights packed, store the remaining parameters
as float32 and fold batch-norm running statistics into gamma/beta.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .bitpack import WORD_BITS, pack_rows, unpack_rows
from .entropy import EntropyConfig
from .models import BatchNorm2d, ModelConfig, build_model
from .quant import binarize

__all__ = ["save", "load", "CheckpointError", "Loaded", "MAGIC", "VERSION", "to_bytes", "from_bytes"]

MAGIC = b"BNNC"
VERSION = 1
F64, PACKED, F32 = 0, 1, 2


class CheckpointError(ValueError):
    pass


class Loaded:
    def __init__(self, model, header, optimizer_state=None):
        self.model = model
        self.header = header
        self.optimizer_state = optimizer_state

    def __iter__(self):
        yield self.model
        yield self.optimizer_state


def _record(name: str, code: int, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    if not raw:
        raise CheckpointError("unnamed parameter")
    out = io.BytesIO()
    out.write(struct.pack("<H", len(raw)))
    out.write(raw)
    out.write(struct.pack("<BB", code, array.ndim))
    out.write(struct.pack(f"<{array.ndim}I", *array.shape))
    if code == F64:
        out.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    elif code == F32:
        out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    else:
        words = pack_rows(array.reshape(array.shape[0], -1))
        out.write(words.astype("<u8").tobytes())
    return out.getvalue()


def _header(model, *, deployment, epoch, metrics, entropy, normalization, optimizer_step):
    return {
        "architecture": model.config.to_dict(),
        "entropy": None if entropy is None else {
            "target": entropy.target, "weight": entropy.weight, "k": entropy.k,
            "scope": None if entropy.scope is None else sorted(entropy.scope)},
        "epoch": epoch,
        "metrics": metrics or {},
        "normalization": normalization,
        "deployment": deployment,
        "optimizer_step": optimizer_step,
        "bn_eps": 0.0 if deployment else _bn_eps(model),
    }


def _bn_eps(model) -> float:
    for _, m in model.named_modules():
        if isinstance(m, BatchNorm2d):
            return m.eps
    return 1e-5


def to_bytes(model, optimizer=None, *, deployment=False, epoch=0, metrics=None,
             entropy: EntropyConfig | None = None, normalization=None) -> bytes:
    if deployment and not model.config.binarize:
        raise CheckpointError("deployment packing needs a binarized model")
    params = model.named_parameters()
    binary_names = model.binary_parameter_names() if model.config.binarize else set()
    records = []
    if deployment:
        bn_modules = {name: m for name, m in model.named_modules() if isinstance(m, BatchNorm2d)}
        folded = {}
        for name, bn in bn_modules.items():
            scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
            folded[f"{name}.gamma"] = scale
            folded[f"{name}.beta"] = bn.beta.data - bn.running_mean * scale
        for name, p in params.items():
            if name in binary_names:
                records.append(_record(name, PACKED, binarize(p)))
            else:
                records.append(_record(name, F32, folded.get(name, p.data)))
    else:
        for name, p in params.items():
            records.append(_record(name, F64, p.data))
        for name, b in model.named_buffers().items():
            records.append(_record(name, F64, b))
        if optimizer is not None:
            for name, v in optimizer.velocity.items():
                records.append(_record(f"optim.velocity/{name}", F64, v))
    header = json.dumps(_header(model, deployment=deployment, epoch=epoch, metrics=metrics,
                                entropy=entropy, normalization=normalization,
                                optimizer_step=None if optimizer is None else optimizer.step_count),
                        sort_keys=True).encode("utf-8")
    body = io.BytesIO()
    body.write(MAGIC)
    body.write(struct.pack("<II", VERSION, len(header)))
    body.write(header)
    body.write(struct.pack("<I", len(records)))
    for r in records:
        body.write(r)
    blob = body.getvalue()
    return blob + struct.pack("<I", zlib.crc32(blob))


def save(model, optimizer=None, path=None, **kwargs) -> int:
    """Write a checkpoint; returns the number of bytes written."""
    blob = to_bytes(model, optimizer, **kwargs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(blob: bytes) -> Loaded:
    if len(blob) < 16:
        raise CheckpointError("truncated checkpoint")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, not a BNNC checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupted")
    rd = _Reader(blob[:-4])
    rd.take(8)
    (hlen,) = rd.unpack("<I")
    header = json.loads(rd.take(hlen).decode("utf-8"))
    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        code, rank = rd.unpack("<BB")
        dims = rd.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        if code == F64:
            arr = np.frombuffer(rd.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        elif code == F32:
            arr = np.frombuffer(rd.take(4 * size), dtype="<f4").astype(np.float64).reshape(dims)
        elif code == PACKED:
            rows = dims[0]
            n = size // rows
            nwords = -(-n // WORD_BITS)
            words = np.frombuffer(rd.take(8 * rows * nwords), dtype="<u8").astype(np.uint64)
            arr = unpack_rows(words.reshape(rows, nwords), n).reshape(dims)
        else:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
        tensors[name] = arr
    if rd.pos != len(rd.blob):
        raise CheckpointError("trailing bytes after tensor records")

    config = ModelConfig(**header["architecture"])
    model = build_model(config)
    params = model.named_parameters()
    buffers = model.named_buffers()
    for name, p in params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{name}: stored shape {tensors[name].shape} != model shape {p.shape}")
        p.data[...] = tensors[name]
    for _, m in model.named_modules():
        if isinstance(m, BatchNorm2d):
            m.eps = header.get("bn_eps", m.eps)
            if header.get("deployment"):
                m.running_mean[...] = 0.0
                m.running_var[...] = 1.0
    if not header.get("deployment"):
        for name, b in buffers.items():
            if name not in tensors:
                raise CheckpointError(f"checkpoint lacks buffer {name!r}")
            b[...] = tensors[name]
    optimizer_state = None
    velocity = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("optim.velocity/")}
    if velocity:
        optimizer_state = {"step": header.get("optimizer_step") or 0, "velocity": velocity}
    return Loaded(model.eval(), header, optimizer_state)


def load(path) -> Loaded:
    return from_bytes(Path(path).read_bytes())


def entropy_config_from_header(header: dict) -> EntropyConfig | None:
    ent = header.get("entropy")
    if not ent:
        return None
    return EntropyConfig(target=ent["target"], weight=ent["weight"], k=ent["k"],
                         scope=None if ent["scope"] is None else frozenset(ent["scope"]))
