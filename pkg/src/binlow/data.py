"""MNIST (IDX) and CIFAR-10 (binary batch) readers.

Images come back NHWC in [-1, 1] as float32, labels as int64 class indices,
in file order.  Shuffling is the training loop's job.
"""

from __future__ import annotations

import gzip
import os
from pathlib import Path

import numpy as np

DATA_ENV = "BINLOW_DATA"
DEFAULT_ROOT = "/root/data"

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)


class DatasetError(ValueError):
    """A dataset file is missing or malformed."""


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, DEFAULT_ROOT))


def scale_pixels(raw: np.ndarray) -> np.ndarray:
    # 0 -> -1, 255 -> +1
    return (raw.astype(np.float32) / np.float32(127.5) - np.float32(1.0))


def _read(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except (OSError, EOFError) as e:
        raise DatasetError(f"cannot read {path}: {e}") from e


def parse_idx(buf: bytes, magic: int, name: str = "idx") -> np.ndarray:
    """Parse an unsigned-byte IDX file with the given magic number."""
    if len(buf) < 4:
        raise DatasetError(f"{name}: file too short for an IDX header")
    got = int.from_bytes(buf[:4], "big")
    if got != magic:
        raise DatasetError(f"{name}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise DatasetError(f"{name}: truncated IDX header")
    dims = [int.from_bytes(buf[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    n = int(np.prod(dims))
    if len(buf) - head != n:
        raise DatasetError(f"{name}: expected {n} data bytes for shape {tuple(dims)}, "
                           f"found {len(buf) - head}")
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


def _find(directory: Path, stem: str, kind: str) -> Path:
    # both the canonical dash and the common dotted naming, optionally gzipped
    for name in (f"{stem}-{kind}", f"{stem}.{kind}"):
        for suffix in ("", ".gz"):
            p = directory / (name + suffix)
            if p.is_file():
                return p
    raise DatasetError(f"no {stem} {kind} file in {directory}")


def load_mnist_split(directory, split: str = "train") -> tuple:
    d = Path(directory)
    prefix = {"train": "train", "test": "t10k"}[split]
    ip = _find(d, f"{prefix}-images", "idx3-ubyte")
    lp = _find(d, f"{prefix}-labels", "idx1-ubyte")
    images = parse_idx(_read(ip), IDX_IMAGES, ip.name)
    labels = parse_idx(_read(lp), IDX_LABELS, lp.name)
    if len(images) != len(labels):
        raise DatasetError(f"{ip.name} has {len(images)} images but {lp.name} "
                           f"has {len(labels)} labels")
    return scale_pixels(images)[..., None], labels.astype(np.int64)


def load_mnist(path=None) -> tuple:
    """(train_x, train_y, test_x, test_y) from a directory of IDX files."""
    d = Path(path) if path is not None else data_root() / "mnist"
    if not d.is_dir():
        raise DatasetError(f"MNIST directory {d} does not exist")
    return load_mnist_split(d, "train") + load_mnist_split(d, "test")


def parse_cifar_batch(buf: bytes, name: str = "cifar") -> tuple:
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise DatasetError(f"{name}: length {len(buf)} is not a multiple of the "
                           f"{CIFAR_RECORD}-byte record size")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{name}: label {labels.max()} out of range 0..9")
    # stored planar CHW; move channels last
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return scale_pixels(images), labels


def _cifar_files(d: Path, names) -> tuple:
    xs, ys = [], []
    for n in names:
        p = d / n
        if not p.is_file():
            raise DatasetError(f"missing CIFAR-10 file {p}")
        x, y = parse_cifar_batch(_read(p), n)
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys)


def load_cifar10(path=None) -> tuple:
    """(train_x, train_y, test_x, test_y) from the binary-version batches."""
    d = Path(path) if path is not None else data_root() / "cifar10"
    if not d.is_dir():
        raise DatasetError(f"CIFAR-10 directory {d} does not exist")
    sub = d / "cifar-10-batches-bin"
    if sub.is_dir():
        d = sub
    return _cifar_files(d, CIFAR_TRAIN) + _cifar_files(d, CIFAR_TEST)


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


def load_dataset(name: str, path=None) -> tuple:
    if name not in LOADERS:
        raise DatasetError(f"unknown dataset {name!r}; known: {sorted(LOADERS)}")
    return LOADERS[name](path)


__all__ = ["DatasetError", "data_root", "scale_pixels", "parse_idx", "load_mnist",
           "load_mnist_split", "parse_cifar_batch", "load_cifar10", "load_dataset", "LOADERS"]
