"""Datasets: the CIFAR-10 binary format and a synthetic blob generator."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
CIFAR_ENV = "POLYNEXT_CIFAR10"


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetSource:
    """Images (N, C, H, W) as float64 plus integer labels.

    ``hflip`` says whether horizontal flips are a valid augmentation.
    """

    kind: str
    images: np.ndarray
    labels: np.ndarray
    classes: int
    resolution: int
    path: str | None = None
    seed: int | None = None
    hflip: bool = True
    mean: np.ndarray | None = field(default=None, repr=False)
    std: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "DatasetSource":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def split(self, n_train: int, n_val: int, seed: int = 0) -> tuple["DatasetSource", "DatasetSource"]:
        """Disjoint random train/validation subsets."""
        if n_train + n_val > len(self):
            raise ValueError(f"requested {n_train}+{n_val} samples from {len(self)}")
        perm = np.random.default_rng(seed).permutation(len(self))
        return self.subset(np.sort(perm[:n_train])), self.subset(np.sort(perm[n_train:n_train + n_val]))


# ------------------------------------------------------------------ CIFAR-10

def decode_cifar_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """(uint8 images (N, 3, 32, 32), labels) from concatenated 3073-byte records."""
    if len(raw) % RECORD_BYTES:
        raise DatasetFormatError(f"size {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DatasetFormatError(f"record {bad} has label {labels[bad]} >= {CIFAR_CLASSES}")
    return rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).copy(), labels


def encode_cifar_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3072)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("images and labels differ in length")
    return np.concatenate([labels, images], axis=1).tobytes()


def read_cifar_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return decode_cifar_records(Path(path).read_bytes())


def find_cifar10(path: str | Path | None = None) -> Path | None:
    """First directory holding the binary batches: ``path``, ``$POLYNEXT_CIFAR10``, or common spots."""
    candidates = [path, os.environ.get(CIFAR_ENV), "data/cifar-10-batches-bin",
                  Path.home() / "data/cifar-10-batches-bin"]
    for c in candidates:
        if c and (Path(c) / TEST_FILE).exists():
            return Path(c)
    return None


def load_cifar10(path: str | Path, split: str = "train", limit: int | None = None,
                 standardize: bool = True) -> DatasetSource:
    """Load a split from a ``cifar-10-batches-bin`` directory.

    Pixels are scaled to [0, 1]; with ``standardize`` each channel is shifted
    and scaled by statistics of the training split.
    """
    root = Path(path)
    files = {"train": TRAIN_FILES, "test": (TEST_FILE,)}.get(split)
    if files is None:
        raise ValueError("split must be 'train' or 'test'")
    missing = [f for f in files if not (root / f).exists()]
    if missing:
        raise FileNotFoundError(f"{root} lacks {missing}")
    parts = [read_cifar_file(root / f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.astype(np.float64) / 255.0
    mean = std = None
    if standardize:
        mean, std = cifar_channel_stats(root)
        x = (x - mean[None, :, None, None]) / std[None, :, None, None]
    return DatasetSource("cifar10", x, labels, CIFAR_CLASSES, 32, path=str(root), mean=mean, std=std)


def cifar_channel_stats(root: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of the training split in [0, 1] units."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for f in TRAIN_FILES:
        imgs, _ = read_cifar_file(Path(root) / f)
        x = imgs.astype(np.float64) / 255.0
        total += x.sum(axis=(0, 2, 3))
        sq += (x * x).sum(axis=(0, 2, 3))
        n += x.shape[0] * x.shape[2] * x.shape[3]
    mean = total / n
    return mean, np.sqrt(sq / n - mean * mean)


# ----------------------------------------------------------------- synthetic

def synthetic_dataset(seed: int, classes: int = 10, resolution: int = 32, n: int = 1000,
                      channels: int = 3, noise: float = 0.1) -> DatasetSource:
    """Class-conditioned Gaussian blobs.

    Each class owns a blob position on a ring and a colour; samples jitter the
    position by up to one pixel and add pixel noise. The task is nearly
    linearly separable.
    """
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = resolution / 4
    centers = resolution / 2 - 0.5 + radius * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    colours = 0.5 + 0.5 * rng.random((classes, channels))
    labels = rng.integers(0, classes, size=n)
    jitter = rng.uniform(-1, 1, size=(n, 2))
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    sigma = resolution / 10
    c = centers[labels] + jitter
    blob = np.exp(-((yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2)
                  / (2 * sigma ** 2))
    images = blob[:, None] * colours[labels][:, :, None, None]
    images = np.clip(images + noise * rng.standard_normal(images.shape), 0.0, 1.0)
    return DatasetSource("synthetic", images, labels.astype(np.int64), classes, resolution, seed=seed)


def load_source(source: str, *, split: str = "train", seed: int = 0, n: int = 1000,
                classes: int = 10, resolution: int = 32) -> DatasetSource:
    """``synthetic`` (optionally ``synthetic:<n>``) or a CIFAR-10 directory."""
    if source.startswith("synthetic"):
        _, _, count = source.partition(":")
        offset = 0 if split == "train" else 7919
        return synthetic_dataset(seed + offset, classes, resolution, int(count) if count else n)
    return load_cifar10(source, split=split)
