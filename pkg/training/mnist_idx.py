"""
MNIST IDX reader and in-memory datasets.

IDX layout (big-endian):
    images: magic 0x00000803, count, rows, cols, then count*rows*cols unsigned bytes
    labels: magic 0x00000801, count, then count unsigned bytes

Files may be raw or gzip-compressed (``.gz``).
"""

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
from loguru import logger

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "ADMM_NN_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Batch:
    """Images N x H x W x C in [0, 1] and integer class labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("a batch needs at least one sample")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def check_classes(self, num_classes: int) -> None:
        if self.labels.max(initial=0) >= num_classes or self.labels.min(initial=0) < 0:
            raise ValueError(f"labels must lie in [0, {num_classes})")

    def tensors(self, dtype: torch.dtype = torch.float64) -> Tuple[torch.Tensor, torch.Tensor]:
        """NCHW image tensor and int64 label tensor for the network."""
        x = torch.as_tensor(np.ascontiguousarray(self.images.transpose(0, 3, 1, 2)), dtype=dtype)
        y = torch.as_tensor(self.labels, dtype=torch.long)
        return x, y


@dataclass(frozen=True)
class Dataset:
    train: Batch
    test: Batch


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as handle:
        return handle.read()


def _parse_header(raw: bytes, magic: int, ndims: int, path: Path) -> Tuple[int, ...]:
    header = np.frombuffer(raw, dtype=">u4", count=1 + ndims)
    if int(header[0]) != magic:
        raise ValueError(f"{path}: bad IDX magic 0x{int(header[0]):08x}, expected 0x{magic:08x}")
    return tuple(int(d) for d in header[1:])


def read_idx_images(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    raw = _read_bytes(path)
    count, rows, cols = _parse_header(raw, IMAGES_MAGIC, 3, path)
    offset = 16
    expected = offset + count * rows * cols
    if len(raw) != expected:
        raise ValueError(f"{path}: {len(raw)} bytes, header promises {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=offset)
    return pixels.reshape(count, rows, cols)


def read_idx_labels(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    raw = _read_bytes(path)
    (count,) = _parse_header(raw, LABELS_MAGIC, 1, path)
    offset = 8
    if len(raw) != offset + count:
        raise ValueError(f"{path}: {len(raw)} bytes, header promises {offset + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).astype(np.int64)


def _locate(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def normalize(pixels: np.ndarray) -> np.ndarray:
    """uint8 N x H x W -> float N x H x W x 1 in [0, 1]."""
    return (pixels.astype(np.float64) / 255.0)[..., None]


def resolve_data_dir(path: Optional[Union[str, Path]] = None) -> Path:
    """Explicit path first, then the ``ADMM_NN_DATA_DIR`` environment variable."""
    if path:
        return Path(path)
    env = os.environ.get(DATA_DIR_ENV)
    if not env:
        raise FileNotFoundError(f"no dataset path given and {DATA_DIR_ENV} is not set")
    return Path(env)


def load_mnist(directory: Optional[Union[str, Path]] = None, limit: Optional[int] = None) -> Dataset:
    directory = resolve_data_dir(directory)
    splits = {}
    for split, (images_stem, labels_stem) in MNIST_FILES.items():
        images = read_idx_images(_locate(directory, images_stem))
        labels = read_idx_labels(_locate(directory, labels_stem))
        if limit is not None:
            images, labels = images[:limit], labels[:limit]
        splits[split] = Batch(normalize(images), labels)
    logger.info(f"MNIST loaded from {directory}: {len(splits['train'])} train / {len(splits['test'])} test")
    return Dataset(splits["train"], splits["test"])


def synthetic_dataset(n_train: int = 256, n_test: int = 128, num_classes: int = 10,
                      image_size: int = 28, seed: int = 0) -> Dataset:
    """
    Small separable image dataset for tests and smoke runs.

    Each class lights a different horizontal band; Gaussian noise on top.
    """
    rng = np.random.default_rng(seed)

    def make(n: int) -> Batch:
        labels = rng.integers(0, num_classes, size=n)
        images = rng.normal(0.1, 0.05, size=(n, image_size, image_size, 1))
        band = max(1, image_size // num_classes)
        for i, label in enumerate(labels):
            start = (label * band) % image_size
            images[i, start:start + band, :, 0] += 0.8
        return Batch(np.clip(images, 0.0, 1.0), labels.astype(np.int64))

    return Dataset(make(n_train), make(n_test))
