"""Dataset readers (CIFAR-10 binary batches, MNIST idx) and augmentation."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset", "DataFormatError", "load_cifar10", "load_mnist", "load_digits32",
    "load_dataset", "augment", "normalize", "channel_stats", "subset", "iterate_batches",
    "CIFAR_TRAIN_FILES", "CIFAR_TEST_FILE",
]

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORD = 1 + 3 * 32 * 32

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: truncated record ({raw.size} bytes is not a multiple of {CIFAR_RECORD})")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise DataFormatError(f"{path}: label byte {labels.max()} out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch of CIFAR-10 (binary version)."""
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    parts = [_read_cifar_file(d / name) for name in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10, "train")
    vx, vy = _read_cifar_file(d / CIFAR_TEST_FILE)
    return train, Dataset(vx, vy, 10, "val")


def _open_maybe_gz(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"missing MNIST file: {path}")


def _read_idx_images(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise DataFormatError(f"{path}: file too short for an idx image header")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    body = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if body.size != count * rows * cols:
        raise DataFormatError(f"{path}: expected {count}x{rows}x{cols} pixels, found {body.size} bytes")
    return body.reshape(count, 1, rows, cols).astype(np.float64) / 255.0


def _read_idx_labels(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise DataFormatError(f"{path}: file too short for an idx label header")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    body = np.frombuffer(blob, dtype=np.uint8, offset=8)
    if body.size != count:
        raise DataFormatError(f"{path}: header declares {count} labels, found {body.size}")
    return body.astype(np.int64)


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    out = []
    for tag, split in (("train", "train"), ("t10k", "val")):
        images = _read_idx_images(d / f"{tag}-images-idx3-ubyte")
        labels = _read_idx_labels(d / f"{tag}-labels-idx1-ubyte")
        if len(images) != len(labels):
            raise DataFormatError(f"{tag}: {len(images)} images but {len(labels)} labels")
        out.append(Dataset(images, labels, 10, split))
    return out[0], out[1]


def load_digits32(val_fraction: float = 0.3, seed: int = 0) -> tuple[Dataset, Dataset]:
    """scikit-learn's bundled 8x8 digits, upscaled 4x to 1x32x32 (offline smoke data)."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    imgs = np.kron(bunch.images / 16.0, np.ones((4, 4)))[:, None]
    labels = bunch.target.astype(np.int64)
    order = np.random.default_rng(seed).permutation(len(labels))
    cut = int(len(labels) * (1 - val_fraction))
    tr, va = order[:cut], order[cut:]
    return Dataset(imgs[tr], labels[tr], 10, "train"), Dataset(imgs[va], labels[va], 10, "val")


def load_dataset(name: str, directory=None) -> tuple[Dataset, Dataset]:
    if name == "cifar10":
        return load_cifar10(directory)
    if name == "mnist":
        return load_mnist(directory)
    if name == "digits":
        return load_digits32()
    raise ValueError(f"unknown dataset {name!r}; expected cifar10, mnist or digits")


def subset(ds: Dataset, count: int | None, seed: int = 0) -> Dataset:
    """First ``count`` samples of a fixed class-mixing permutation."""
    if count is None or count >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).permutation(len(ds))[:count])
    return replace(ds, images=ds.images[idx], labels=ds.labels[idx])


def augment(batch: np.ndarray, mode: str = "train", rng: np.random.Generator | None = None,
            pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` pixels, random crop back to size, random horizontal flip."""
    if mode != "train":
        return batch
    if rng is None:
        raise ValueError("augment: training mode needs a seeded generator")
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return ds.images.mean(axis=(0, 2, 3)), ds.images.std(axis=(0, 2, 3))


def normalize(ds: Dataset, mean, std) -> Dataset:
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    if np.any(std <= 0):
        raise ValueError(f"normalize: non-positive std {std}")
    shape = (1, -1, 1, 1)
    return replace(ds, images=(ds.images - mean.reshape(shape)) / std.reshape(shape))


def iterate_batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (images, labels); shuffled when ``rng`` is given."""
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for i in range(0, len(ds), batch_size):
        idx = order[i:i + batch_size]
        yield ds.images[idx], ds.labels[idx]
