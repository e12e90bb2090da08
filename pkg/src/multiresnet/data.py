"""Datasets: the CIFAR-10 binary format, a synthetic stand-in, and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
RECORDS_PER_FILE = 10_000
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images ``[N,C,H,W]`` in [0, 1] with integer labels.

    ``mean``/``std`` are per-channel normalization statistics; a test split
    carries the statistics of its training split.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean[None, :, None, None]) / self.std[None, :, None, None]

    def normalized(self) -> np.ndarray:
        return self.normalize(self.images)

    def with_stats(self, mean: np.ndarray, std: np.ndarray) -> "Dataset":
        return replace(self, mean=np.asarray(mean, dtype=np.float64), std=np.asarray(std, dtype=np.float64))

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


# -- CIFAR-10 ------------------------------------------------------------------


def parse_cifar10_bytes(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records into ``(uint8 pixels [N,3,32,32], labels)``."""
    if len(raw) == 0:
        raise DatasetError(f"{source}: empty file")
    if len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES
        raise DatasetError(
            f"{source}: truncated record at byte offset {whole * RECORD_BYTES} "
            f"({len(raw)} bytes is not a multiple of {RECORD_BYTES})"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{source}: label byte {labels[i]} > 9 at byte offset {i * RECORD_BYTES}")
    return rec[:, 1:].reshape(-1, *CIFAR_SHAPE), labels.astype(np.int64)


def read_cifar10_file(path, expected_records: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    pixels, labels = parse_cifar10_bytes(path.read_bytes(), str(path))
    if expected_records is not None and len(labels) != expected_records:
        raise DatasetError(f"{path}: expected {expected_records} records, found {len(labels)}")
    return pixels, labels


def encode_cifar10(pixels: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar10_bytes`; ``pixels`` are uint8 or floats in [0,1]."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.shape[1:] != CIFAR_SHAPE:
        raise DatasetError(f"CIFAR records need images of shape {CIFAR_SHAPE}, got {pixels.shape[1:]}")
    rec = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = pixels.reshape(len(labels), -1)
    return rec.tobytes()


def load_cifar10(path, split: str = "train", strict: bool = True) -> Dataset:
    """Load a CIFAR-10 split from its binary-format directory or a single file.

    A directory must hold ``data_batch_1..5.bin`` (train) or
    ``test_batch.bin`` (test); with ``strict`` each file must contain
    exactly 10,000 records. Normalization statistics come from the training
    files, which must therefore be present for either split.
    """
    path = Path(path)
    if split not in ("train", "test"):
        raise DatasetError(f"unknown split {split!r}")
    expected = RECORDS_PER_FILE if strict else None
    if path.is_dir():
        names = TRAIN_FILES if split == "train" else TEST_FILES
        missing = [n for n in names if not (path / n).exists()]
        if missing:
            raise DatasetError(f"{path}: missing {', '.join(missing)}")
        parts = [read_cifar10_file(path / n, expected) for n in names]
        pixels = np.concatenate([p for p, _ in parts])
        labels = np.concatenate([l for _, l in parts])
    else:
        if not path.exists():
            raise DatasetError(f"{path}: no such file or directory")
        pixels, labels = read_cifar10_file(path)
    images = pixels.astype(np.float64) / 255.0
    if split == "train" or not path.is_dir():
        mean, std = channel_stats(images)
    else:
        train_pixels = np.concatenate([read_cifar10_file(path / n, expected)[0] for n in TRAIN_FILES])
        mean, std = channel_stats(train_pixels.astype(np.float64) / 255.0)
    return Dataset(images, labels, 10, mean, std, split)


# -- synthetic -----------------------------------------------------------------


def bar_templates(num_classes: int, image_size: int, contrast: float = 0.25) -> np.ndarray:
    """One oriented bar through the image centre per class.

    Orientations are spread over [0, 90] degrees so a horizontal flip never
    turns one class's bar into another's.
    """
    size = image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    half_width = max(size / 16.0, 0.5)
    colors = np.array([1.0, 0.8, 0.6])
    out = np.empty((num_classes, 3, size, size))
    for c in range(num_classes):
        theta = 0.5 * math.pi * c / max(num_classes - 1, 1)
        dist = np.abs(-(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta))
        bar = (dist <= half_width).astype(np.float64)
        out[c] = 0.5 + contrast * (2 * bar - 1)[None] * colors[:, None, None]
    return out


def synth_dataset(
    seed: int,
    n_samples: int,
    num_classes: int = 2,
    image_size: int = 8,
    noise: float = 0.2,
    contrast: float = 0.25,
    split: str = "train",
) -> Dataset:
    """Class templates plus Gaussian pixel noise, clipped to [0, 1].

    Classes are assigned round-robin and then shuffled, so class sizes differ
    by at most one.
    """
    if n_samples < num_classes:
        raise ValueError(f"need at least one sample per class ({n_samples} < {num_classes})")
    rng = np.random.default_rng(seed)
    templates = bar_templates(num_classes, image_size, contrast)
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    images = templates[labels] + noise * rng.standard_normal((n_samples, 3, image_size, image_size))
    images = np.clip(images, 0.0, 1.0)
    mean, std = channel_stats(images)
    return Dataset(images, labels.astype(np.int64), num_classes, mean, std, split)


def synth_splits(seed: int, n_train: int, n_test: int, **kw) -> tuple[Dataset, Dataset]:
    """Independent train/test draws; the test split carries training statistics."""
    seeds = np.random.SeedSequence(seed).generate_state(2)
    train = synth_dataset(int(seeds[0]), n_train, split="train", **kw)
    test = synth_dataset(int(seeds[1]), n_test, split="test", **kw)
    return train, test.with_stats(train.mean, train.std)


def template_classify(images: np.ndarray, templates: np.ndarray) -> np.ndarray:
    d = ((images[:, None] - templates[None]) ** 2).sum(axis=(2, 3, 4))
    return np.argmin(d, axis=1)


# -- augmentation --------------------------------------------------------------


def crop_padding(image_size: int) -> int:
    """Zero padding for random-crop translation: 4 pixels at 32x32, scaled otherwise."""
    return max(1, image_size // 8)


def augment(
    image: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    *,
    flip: Optional[bool] = None,
    offset: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    """Random horizontal flip (p=0.5), then zero-pad and crop back to size.

    ``flip`` and ``offset`` (crop origin in the padded image; ``(pad, pad)``
    is the centre crop) override the random draws.
    """
    c, h, w = image.shape
    pad = crop_padding(h)
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if offset is None:
        offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    out = image[:, :, ::-1] if flip else image
    padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)))
    oy, ox = offset
    return padded[:, oy : oy + h, ox : ox + w].copy()


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """:func:`augment` applied to every image with draws from one stream."""
    n, c, h, w = images.shape
    pad = crop_padding(h)
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    src = np.where(flips[:, None, None, None], images[:, :, :, ::-1], images)
    padded = np.pad(src, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = offsets[i]
        out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    return out
