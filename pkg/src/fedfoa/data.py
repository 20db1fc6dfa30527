"""Datasets, IID partitioning and two-view augmentation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray | None = None
    source: str = "synthetic"
    num_classes: int | None = None

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise DatasetError("samples must be a 2-D matrix")
        if self.labels is not None:
            if self.labels.shape != (len(self.samples),):
                raise DatasetError("labels must have one entry per sample")
            k = self.num_classes if self.num_classes is not None else int(self.labels.max(initial=-1)) + 1
            if np.any(self.labels < 0) or np.any(self.labels >= k):
                raise DatasetError(f"labels must lie in [0, {k})")
            object.__setattr__(self, "num_classes", k)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    @property
    def image_shape(self):
        return CIFAR_SHAPE if self.source == "cifar10" else None

    def unlabeled(self) -> "Dataset":
        """Copy without labels; the only form handed to SSL training."""
        return Dataset(self.samples, None, self.source)

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.samples[index], labels, self.source, self.num_classes)


def gen_synthetic(num_classes: int, input_dim: int, samples_per_class: int,
                  noise_scale: float, seed: int) -> Dataset:
    """Gaussian clusters around unit-norm random centers, class-major order."""
    if min(num_classes, input_dim, samples_per_class) <= 0:
        raise DatasetError("counts must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    samples = centers[labels] + noise_scale * rng.normal(size=(len(labels), input_dim))
    return Dataset(samples, labels, "synthetic", num_classes)


def split_holdout(ds: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split that moves ``per_class`` samples of each class to a test set."""
    if ds.labels is None:
        raise DatasetError("split_holdout needs labels")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) <= per_class:
            raise DatasetError(f"class {c} has only {len(idx)} samples")
        test_idx.append(rng.choice(idx, per_class, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(ds), bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask)), ds.subset(test_idx)


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"x{i}" for i in range(ds.input_dim))])
        labels = ds.labels if ds.labels is not None else [""] * len(ds)
        for y, row in zip(labels, ds.samples):
            w.writerow([y, *(repr(float(v)) for v in row)])


def load_csv(path, source: str = "synthetic") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "label":
        raise DatasetError(f"{path}: missing 'label,x0,...' header")
    body = rows[1:]
    samples = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(rows[0]) - 1)
    raw = [r[0] for r in body]
    labels = None if any(v == "" for v in raw) else np.array([int(v) for v in raw], dtype=np.int64)
    return Dataset(samples, labels, source)


# --- CIFAR-10 binary batches -------------------------------------------------

def read_cifar10_batch(path) -> Dataset:
    """One CIFAR-10 ``.bin`` file: 3073-byte records (label, then RGB planes)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from None
    whole, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise DatasetError(
            f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
            f"({rest} of {CIFAR_RECORD} bytes present)"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(whole, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if np.any(labels >= 10):
        bad = int(np.argmax(labels >= 10))
        raise DatasetError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    samples = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(samples, labels, "cifar10", 10)


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    """Train (50,000) and test (10,000) splits from a ``cifar-10-batches-bin`` directory."""
    root = Path(path)
    parts = []
    for name in CIFAR_TRAIN_FILES:
        ds = read_cifar10_batch(root / name)
        if len(ds) != 10_000:
            raise DatasetError(f"{root / name}: expected 10000 records, found {len(ds)}")
        parts.append(ds)
    test = read_cifar10_batch(root / CIFAR_TEST_FILE)
    if len(test) != 10_000:
        raise DatasetError(f"{root / CIFAR_TEST_FILE}: expected 10000 records, found {len(test)}")
    train = Dataset(
        np.concatenate([p.samples for p in parts]),
        np.concatenate([p.labels for p in parts]),
        "cifar10",
        10,
    )
    return train, test


# --- partitioning and augmentation -------------------------------------------

def partition_iid(ds: Dataset, num_clients: int, seed: int) -> list[Dataset]:
    """Shuffle then split into near-equal shards (remainder to the first shards)."""
    if num_clients < 1:
        raise DatasetError("num_clients must be >= 1")
    if num_clients > len(ds):
        raise DatasetError(f"cannot split {len(ds)} samples across {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [ds.subset(idx) for idx in np.array_split(perm, num_clients)]


def two_view_augment(batch, rng, noise: float = 0.1, dropout: float = 0.1,
                     image_shape=None, flip: bool = True) -> np.ndarray:
    """Two stochastic views per row, interleaved: rows 2k, 2k+1 come from sample k.

    Each view gets additive Gaussian noise (std ``noise``) followed by coordinate
    dropout with probability ``dropout`` (no rescaling). When ``image_shape`` is
    given, each view is also horizontally flipped with probability 1/2.
    """
    x = np.repeat(np.asarray(batch, dtype=np.float64), 2, axis=0)
    if image_shape is not None and flip:
        imgs = x.reshape(len(x), *image_shape)
        flips = rng.random(len(x)) < 0.5
        imgs[flips] = imgs[flips][..., ::-1]
        x = imgs.reshape(len(x), -1)
    if noise > 0:
        x = x + noise * rng.normal(size=x.shape)
    if dropout > 0:
        x = x * (rng.random(x.shape) >= dropout)
    return x


class BatchStream:
    """Endless reshuffled mini-batches over one client's unlabeled samples."""

    def __init__(self, samples: np.ndarray, batch_size: int, rng):
        if len(samples) == 0:
            raise DatasetError("empty partition")
        if batch_size > len(samples):
            raise DatasetError(f"batch size {batch_size} exceeds partition size {len(samples)}")
        self.samples = samples
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.samples))
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.samples[idx]
