"""Datasets and the deterministic batch schedule."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    features: np.ndarray  # (n, D) float, values in [0, 1] for images
    labels: np.ndarray  # (n,) int64
    num_classes: int
    shape: tuple

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ConfigError("empty dataset")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("features and labels disagree on sample count")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConfigError("label outside class range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.features[:n], self.labels[:n], self.num_classes, self.shape)


def read_cifar10_file(path) -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise FormatError(f"{path}: {raw.size} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise FormatError(f"{path}: label byte {labels.max()} is not a CIFAR-10 class")
    feats = rec[:, 1:].astype(np.float32) / np.float32(255.0)
    return Dataset(feats, labels, CIFAR_CLASSES, CIFAR_SHAPE)


def load_cifar10(path, train: bool = True, limit: int | None = None) -> Dataset:
    """Load one CIFAR-10 binary file, or the train/test files of a directory."""
    path = Path(path)
    if path.is_file():
        files = [path]
    else:
        names = CIFAR_TRAIN_FILES if train else [CIFAR_TEST_FILE]
        files = [path / n for n in names if (path / n).exists()]
        if not files:
            raise FormatError(f"no CIFAR-10 binary files under {path}")
    parts = []
    total = 0
    for f in files:
        ds = read_cifar10_file(f)
        parts.append(ds)
        total += len(ds)
        if limit is not None and total >= limit:
            break
    feats = np.concatenate([p.features for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    if limit is not None:
        feats, labels = feats[:limit], labels[:limit]
    return Dataset(feats, labels, CIFAR_CLASSES, CIFAR_SHAPE)


def find_cifar10() -> Path | None:
    """Locate the binary CIFAR-10 directory via ``$CIFAR10_DIR`` or common spots."""
    candidates = []
    if os.environ.get("CIFAR10_DIR"):
        candidates.append(Path(os.environ["CIFAR10_DIR"]))
    home = Path.home()
    candidates += [
        Path("data/cifar-10-batches-bin"),
        home / "data" / "cifar-10-batches-bin",
        home / ".cache" / "cifar-10-batches-bin",
        Path("/data/cifar-10-batches-bin"),
    ]
    for c in candidates:
        if (c / CIFAR_TRAIN_FILES[0]).exists():
            return c
    return None


def write_cifar10_file(path, images_u8: np.ndarray, labels) -> None:
    """Write records in the CIFAR-10 binary layout (label byte + 3072 pixels)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    if images_u8.shape[1] != CIFAR_RECORD - 1:
        raise FormatError("each image must have 3072 bytes")
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    rec.tofile(path)


def synth_dataset(classes: int, dim: int, n: int, seed: int, margin: float = 4.0, noise: float = 1.0) -> Dataset:
    """Gaussian blobs around well-separated class centres.

    Centres sit at distance ``margin * noise`` along orthogonal-ish random
    directions, so for a large ``margin`` a linear model separates the classes.
    """
    if classes < 2 or dim <= 0:
        raise ConfigError("need >= 2 classes and dim > 0")
    if n <= 0:
        raise ConfigError("empty dataset: n must be positive")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    centres *= margin * noise
    labels = rng.integers(0, classes, size=n)
    feats = centres[labels] + noise * rng.standard_normal((n, dim))
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), classes, (dim,))


class BatchSchedule:
    """Which samples every worker sees at every iteration.

    Each epoch is a seeded permutation of the dataset, cut into union batches
    of ``P*K``; worker ``p`` takes positions ``p-1, p-1+P, ...`` of the union
    batch. The permutation depends only on the seed and the epoch index.
    """

    def __init__(self, n: int, num_workers: int, batch_size: int, seed: int):
        self.n = n
        self.P = num_workers
        self.K = batch_size
        self.seed = seed
        self.union = num_workers * batch_size
        if self.union > n:
            raise ConfigError(f"P*K = {self.union} exceeds dataset size {n}")
        self.per_epoch = n // self.union
        self._perm_cache = {}

    def _perm(self, epoch: int) -> np.ndarray:
        p = self._perm_cache.get(epoch)
        if p is None:
            p = np.random.default_rng([self.seed, epoch]).permutation(self.n)
            self._perm_cache = {epoch: p}
        return p

    def union_indices(self, t: int) -> np.ndarray:
        """Sample indices of the union batch at 1-based iteration ``t``."""
        epoch, pos = divmod(t - 1, self.per_epoch)
        return self._perm(epoch)[pos * self.union : (pos + 1) * self.union]

    def worker_indices(self, t: int, worker_id: int) -> np.ndarray:
        return self.union_indices(t)[worker_id - 1 :: self.P]


def batch_source(ds: Dataset, sched: BatchSchedule, dtype=np.float64):
    """``(t, worker_id) -> (x, labels)`` callable for workers."""

    def get(t: int, worker_id: int):
        idx = sched.worker_indices(t, worker_id)
        return ds.features[idx].astype(dtype, copy=False), ds.labels[idx]

    return get
