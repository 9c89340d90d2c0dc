"""Dataset ingestion, synthetic data and seeded batching.

Images are float32 arrays of shape (N, 3, 32, 32) in raw [0, 1] pixel
space; per-model normalisation happens inside the models.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise InputError(f"images must have shape (N, 3, 32, 32), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InputError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def subset(self, start, stop=None):
        sl = slice(start, stop)
        return Dataset(self.images[sl], self.labels[sl], self.split, self.num_classes)


def parse_records(buf, source="<bytes>", offset=0):
    """Decode concatenated 3073-byte records (label byte + 3 x 1024 plane bytes)."""
    if len(buf) % RECORD_BYTES:
        raise FormatError(
            f"{source}: length {len(buf)} is not a multiple of {RECORD_BYTES}",
            offset + len(buf) - len(buf) % RECORD_BYTES,
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: label byte {labels[bad[0]]} > 9", offset + int(bad[0]) * RECORD_BYTES)
    images = raw[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return images, labels


def load_cifar10_binary(path, split="train", limit=None):
    """Read the standard CIFAR-10 binary batches from ``path``.

    ``limit`` keeps the first ``limit`` records in file order.
    """
    if split not in ("train", "test"):
        raise InputError(f"split must be 'train' or 'test', got {split!r}")
    names = TRAIN_FILES if split == "train" else TEST_FILES
    images, labels = [], []
    remaining = limit
    for name in names:
        if remaining is not None and remaining <= 0:
            break
        fpath = os.path.join(path, name)
        if not os.path.exists(fpath):
            raise FormatError(f"missing CIFAR-10 batch file {fpath}")
        with open(fpath, "rb") as fh:
            x, y = parse_records(fh.read(), fpath)
        if remaining is not None:
            x, y = x[:remaining], y[:remaining]
        images.append(x)
        labels.append(y)
        if remaining is not None:
            remaining -= len(y)
    return Dataset(np.concatenate(images), np.concatenate(labels), split)


def to_records(ds):
    """Encode a dataset as 3073-byte records (pixels rounded to bytes)."""
    if ds.labels.max(initial=0) > 255:
        raise InputError("labels must fit in one byte")
    pix = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8).reshape(len(ds), -1)
    out = np.empty((len(ds), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = pix
    return out.tobytes()


def write_cifar10_binary(ds, path):
    with open(path, "wb") as fh:
        fh.write(to_records(ds))


def synthetic_dataset(n, seed=0, separation=1.0, num_classes=10, noise=0.15, pattern_seed=1234,
                      split="train"):
    """Class-conditional Gaussian blobs rendered as 3x32x32 images.

    Each class owns a smooth colour pattern (fixed by ``pattern_seed`` so
    that train and test splits agree).  An image is a mid-grey canvas plus
    ``separation`` times its class pattern plus i.i.d. pixel noise,
    clipped to [0, 1].  ``separation=0`` makes the classes
    indistinguishable.
    """
    if n <= 0:
        raise InputError("n must be positive")
    prng = np.random.default_rng(pattern_seed)
    # low-frequency patterns: random 4x4 grids upsampled to 32x32
    coarse = prng.standard_normal((num_classes, 3, 4, 4))
    patterns = np.kron(coarse, np.ones((1, 1, 8, 8)))
    patterns /= np.abs(patterns).max(axis=(1, 2, 3), keepdims=True)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    amp = 0.2 * separation
    images = 0.5 + amp * patterns[labels] + noise * rng.standard_normal((n, *IMAGE_SHAPE))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), split, num_classes)


def batch_iter(ds, batch, shuffle_seed=None):
    """Yield ``(images, labels)`` batches covering every item exactly once."""
    if batch <= 0:
        raise InputError("batch must be positive")
    images, labels = (ds.images, ds.labels) if isinstance(ds, Dataset) else ds
    n = len(labels)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch):
        idx = order[start : start + batch]
        yield images[idx], labels[idx]
