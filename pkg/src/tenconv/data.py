"""Dataset ingestion (MNIST IDX, CIFAR-10/100 binary), synthetic data, and
batch assembly.

Pixels are scaled to [0, 1] by dividing by 255; no mean/std normalization or
augmentation exists anywhere in this module (the /255 scaling is treated as
representation, not prior knowledge, and can be disabled with scale=False).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataEmpty, FormatError, LabelOutOfRange

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR10_CLASSES = 10
CIFAR100_CLASSES = 100


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N, C, H, W] float in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self) -> None:
        if len(self.images) == 0:
            raise DataEmpty("image set has no samples")
        if len(self.images) != len(self.labels):
            raise FormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise LabelOutOfRange(
                f"labels span [{self.labels.min()}, {self.labels.max()}] "
                f"for class count {self.class_count}"
            )

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, n: int, seed: int = 0) -> "LabeledImageSet":
        """Seeded sample of n items without replacement."""
        if n >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return LabeledImageSet(self.images[idx], self.labels[idx], self.class_count)

    def split(self, val_fraction: float, seed: int = 0) -> tuple["LabeledImageSet", "LabeledImageSet"]:
        """Disjoint (train, val) split under a seeded permutation."""
        n = len(self)
        n_val = int(round(n * val_fraction))
        if n_val < 1 or n_val >= n:
            raise DataEmpty(f"val fraction {val_fraction} leaves an empty split of {n} samples")
        order = np.random.default_rng(seed).permutation(n)
        val, tr = order[:n_val], order[n_val:]
        return (
            LabeledImageSet(self.images[tr], self.labels[tr], self.class_count),
            LabeledImageSet(self.images[val], self.labels[val], self.class_count),
        )


def _read_be32(f, what: str) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated IDX header while reading {what}")
    return struct.unpack(">I", raw)[0]


def _read_payload(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(raw)}")
    return raw


def load_mnist(images_path, labels_path, scale: bool = True) -> LabeledImageSet:
    """Load an MNIST IDX image/label file pair (big-endian headers)."""
    with open(images_path, "rb") as f:
        magic = _read_be32(f, "image magic")
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        count = _read_be32(f, "image count")
        rows = _read_be32(f, "row count")
        cols = _read_be32(f, "column count")
        raw = _read_payload(f, count * rows * cols, "image payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, "label magic")
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        n_labels = _read_be32(f, "label count")
        if n_labels != count:
            raise FormatError(f"{count} images but {n_labels} labels")
        labels = np.frombuffer(_read_payload(f, n_labels, "label payload"), dtype=np.uint8)
    pixels = images.astype(np.float64)
    if scale:
        pixels /= 255.0
    return LabeledImageSet(pixels, labels.astype(np.int64), 10)


def load_cifar(batch_paths, variant: int = 10, scale: bool = True) -> LabeledImageSet:
    """Load CIFAR binary batches.

    Each CIFAR-10 record is 1 label byte + 3072 pixel bytes; CIFAR-100
    records carry a coarse and a fine label byte and the fine label is used.
    """
    if variant not in (10, 100):
        raise FormatError(f"unknown CIFAR variant {variant}")
    label_bytes = 1 if variant == 10 else 2
    record = label_bytes + 3072
    all_images, all_labels = [], []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % record != 0:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of the {record}-byte record"
            )
        data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        all_labels.append(data[:, label_bytes - 1].astype(np.int64))
        all_images.append(data[:, label_bytes:].reshape(-1, 3, 32, 32))
    images = np.concatenate(all_images).astype(np.float64)
    if scale:
        images /= 255.0
    labels = np.concatenate(all_labels)
    return LabeledImageSet(images, labels, CIFAR10_CLASSES if variant == 10 else CIFAR100_CLASSES)


def make_synthetic(
    classes: int,
    per_class: int,
    geometry: tuple[int, int, int] = (1, 8, 8),
    seed: int = 0,
    margin: float = 3.0,
    sigma: float = 0.1,
) -> LabeledImageSet:
    """Seeded Gaussian class blobs rendered as images.

    Each class gets a random +/-1 pixel pattern; samples are that pattern
    scaled by margin*sigma/2 around mid-gray plus Gaussian noise of scale
    sigma, clipped to [0, 1]. At the default margin of 3 the classes are
    linearly separable; at margin 0 they coincide.
    """
    if classes < 1 or per_class < 1:
        raise DataEmpty("need at least one class and one sample per class")
    c, h, w = geometry
    rng = np.random.default_rng(seed)
    patterns = rng.choice([-1.0, 1.0], size=(classes, c, h, w))
    images = np.empty((classes * per_class, c, h, w))
    labels = np.empty(classes * per_class, dtype=np.int64)
    amp = margin * sigma / 2.0
    for k in range(classes):
        lo = k * per_class
        noise = rng.standard_normal((per_class, c, h, w)) * sigma
        images[lo : lo + per_class] = np.clip(0.5 + amp * patterns[k] + noise, 0.0, 1.0)
        labels[lo : lo + per_class] = k
    return LabeledImageSet(images, labels, classes)


def batches(dataset: LabeledImageSet, batch_size: int, seed: int, epoch: int):
    """Yield (images, labels) under a permutation seeded by (seed, epoch).

    The final partial batch is kept.
    """
    if batch_size < 1:
        raise DataEmpty(f"batch size {batch_size} < 1")
    n = len(dataset)
    if n == 0:
        raise DataEmpty("empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
