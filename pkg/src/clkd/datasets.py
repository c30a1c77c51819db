"""Synthetic blobs, IDX (MNIST-format) ingestion, augmentation and batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    stats: tuple[float, float] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) < 1:
            raise ParameterError("dataset must contain at least one sample")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ParameterError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ParameterError("features contain NaN or Inf")
        if self.split not in ("train", "test"):
            raise ParameterError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class blobs.

    Each class owns ``clusters_per_class`` centres drawn from
    ``N(0, center_spread^2 I)``; samples are a uniformly chosen centre of
    their class plus ``N(0, noise^2 I)``. ``samples_per_class`` counts
    train and test together (80/20 split per class).
    """

    num_classes: int = 10
    samples_per_class: int = 250
    input_dim: int = 16
    center_spread: float = 1.0
    noise: float = 1.0
    clusters_per_class: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "samples_per_class", "input_dim", "clusters_per_class"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.noise > 0:
            raise ParameterError(f"noise must be positive, got {self.noise}")
        if not self.center_spread >= 0:
            raise ParameterError(f"center_spread must be non-negative, got {self.center_spread}")


def gen_gaussian_blobs(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(spec.seed)
    c, k, n, d = spec.num_classes, spec.clusters_per_class, spec.samples_per_class, spec.input_dim
    centers = rng.standard_normal((c, k, d)) * spec.center_spread
    which = rng.integers(0, k, size=(c, n))
    noise = rng.standard_normal((c, n, d)) * spec.noise
    x = centers[np.arange(c)[:, None], which] + noise
    n_train = int(round(0.8 * n))
    if n > 1:
        n_train = min(max(n_train, 1), n - 1)
    y = np.broadcast_to(np.arange(c)[:, None], (c, n))
    train = Dataset(x[:, :n_train].reshape(-1, d), y[:, :n_train].reshape(-1), c, "train")
    test = Dataset(x[:, n_train:].reshape(-1, d), y[:, n_train:].reshape(-1), c, "test") if n_train < n else train
    return train, test


def blob_centers(spec: SyntheticSpec) -> np.ndarray:
    """The (C, clusters, D) centres used by :func:`gen_gaussian_blobs`."""
    rng = np.random.default_rng(spec.seed)
    return rng.standard_normal((spec.num_classes, spec.clusters_per_class, spec.input_dim)) * spec.center_spread


# --------------------------------------------------------------------------
# IDX


def _read_idx(path: str | os.PathLike, magic: int, ndim: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", len(blob))
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated IDX dimension header", len(blob))
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(blob) < header + size:
        raise FormatError(f"{path}: truncated payload, expected {size} bytes", len(blob))
    if len(blob) > header + size:
        raise FormatError(f"{path}: {len(blob) - header - size} trailing bytes", header + size)
    return np.frombuffer(blob, dtype=np.uint8, offset=header, count=size).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train",
             stats: tuple[float, float] | None = None) -> Dataset:
    """Load an IDX image/label pair as (N, 1, H, W) standardised images.

    Pixels are scaled to [0, 1] and standardised with the dataset's own
    mean/std unless ``stats`` supplies them (use the train stats for test).
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images", 4)
    x = images.astype(np.float64)[:, None] / 255.0
    mean, std = stats if stats is not None else (float(x.mean()), float(x.std()))
    if std <= 0:
        std = 1.0
    x = (x - mean) / std
    c = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(x, labels.astype(np.int64), max(c, 2), split, stats=(mean, std))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of the IDX reader (uint8 images of shape (N, H, W))."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# --------------------------------------------------------------------------
# augmentation


def augment(features: np.ndarray, rng: np.random.Generator, horizontal_flip: bool = False,
            pad_crop: bool = False, flip_prob: float = 0.5, pad: int = 4) -> np.ndarray:
    """Random horizontal flips and pad-then-crop on a (B, C, H, W) batch."""
    if not (horizontal_flip or pad_crop):
        return features
    if features.ndim != 4:
        raise ParameterError(f"augmentation needs (B, C, H, W) images, got shape {features.shape}")
    out = features.copy()
    b, _, h, w = out.shape
    if horizontal_flip:
        flip = rng.random(b) < flip_prob
        out[flip] = out[flip, :, :, ::-1]
    if pad_crop:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, size=b)
        dx = rng.integers(0, 2 * pad + 1, size=b)
        for i in range(b):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


# --------------------------------------------------------------------------
# batching


@dataclass
class BatchIterator:
    """Seeded mini-batch iterator; each pass over it is one epoch with a fresh permutation."""

    dataset: Dataset
    batch_size: int
    seed: int | np.random.SeedSequence = 0
    drop_last: bool = False
    shuffle: bool = True
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_size > len(self.dataset):
            raise ParameterError(
                f"batch_size {self.batch_size} exceeds dataset size {len(self.dataset)}")
        self._rng = np.random.default_rng(self.seed)

    def index_batches(self) -> list[np.ndarray]:
        n = len(self.dataset)
        order = self._rng.permutation(n) if self.shuffle else np.arange(n)
        stop = n - n % self.batch_size if self.drop_last else n
        return [order[i:i + self.batch_size] for i in range(0, stop, self.batch_size)]

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for idx in self.index_batches():
            yield self.dataset.features[idx], self.dataset.labels[idx]


def batches(it: BatchIterator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    return iter(it)
