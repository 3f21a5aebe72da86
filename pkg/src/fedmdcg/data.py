"""Dataset ingestion, Dirichlet label-skew partitioning and label counting.

Readers cover the big-endian IDX image/label pair format and the CIFAR-10
binary batch format; synthetic Gaussian blobs provide a fast stand-in for
tests and demos. Every random choice is drawn from a named stream so the
same inputs always produce the same split.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
CIFAR_BATCH_RECORDS = 10000


class FormatError(ValueError):
    """Malformed dataset file (bad magic, truncated, out-of-range label)."""


@dataclass(frozen=True)
class Dataset:
    """Images in [0, 1] shaped (n, C, H, W) with integer labels in [0, c)."""

    name: str
    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be (n, C, H, W) aligned with labels")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise FormatError("label out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices: np.ndarray, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(name or self.name, self.images[idx], self.labels[idx],
                       self.class_count)


@dataclass(frozen=True)
class PartitionSpec:
    """Dirichlet concentration, client count and seed for one partition."""

    omega: float
    client_count: int
    seed: int

    def __post_init__(self):
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        if self.client_count < 1:
            raise ValueError("need at least one client")


@dataclass(frozen=True)
class LabelCounter:
    """Per-class sample counts for one client's local data."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class LabelDistribution:
    """Probability vector over classes, summing to one."""

    probs: np.ndarray

    def __post_init__(self):
        if (self.probs < 0).any() or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be non-negative and sum to 1")


def _open_maybe_gz(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx_images(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        header = f.read(16)
        if len(header) < 16:
            raise FormatError(f"{path}: truncated IDX image header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{path}: bad image magic 0x{magic:08x}")
        raw = f.read(n * rows * cols)
    if len(raw) != n * rows * cols:
        raise FormatError(f"{path}: truncated IDX image data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    return pixels.astype(np.float64) / 255.0


def _read_idx_labels(path: Path) -> np.ndarray:
    with _open_maybe_gz(path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise FormatError(f"{path}: truncated IDX label header")
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{path}: bad label magic 0x{magic:08x}")
        raw = f.read(n)
    if len(raw) != n:
        raise FormatError(f"{path}: truncated IDX label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def _find_idx_pair(directory: Path, split: str) -> tuple[Path, Path]:
    prefix = "train" if split == "train" else "t10k"
    candidates = [
        (f"{prefix}-images-idx3-ubyte", f"{prefix}-labels-idx1-ubyte"),
        (f"{prefix}-images.idx3-ubyte", f"{prefix}-labels.idx1-ubyte"),
    ]
    for img_name, lab_name in candidates:
        for suffix in ("", ".gz"):
            img, lab = directory / (img_name + suffix), directory / (lab_name + suffix)
            if img.exists() and lab.exists():
                return img, lab
    raise FileNotFoundError(f"no {split} IDX pair under {directory}")


def load_idx(dir_path, split: str = "train", name: str = "idx") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) from a directory."""
    img_path, lab_path = _find_idx_pair(Path(dir_path), split)
    images = _read_idx_images(img_path)
    labels = _read_idx_labels(lab_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{dir_path}: image/label count mismatch")
    return Dataset(name, images, labels, int(labels.max()) + 1)


def load_cifar10(dir_path, split: str = "train") -> Dataset:
    """Read the CIFAR-10 binary batches (label byte + 3072 pixel bytes)."""
    directory = Path(dir_path)
    if not directory.is_dir():
        # common layout nests the batches one level down
        nested = directory / "cifar-10-batches-bin"
        directory = nested if nested.is_dir() else directory
    files = ([directory / f"data_batch_{i}.bin" for i in range(1, 6)]
             if split == "train" else [directory / "test_batch.bin"])
    images, labels = [], []
    for path in files:
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch {path}")
        raw = path.read_bytes()
        if len(raw) != CIFAR_BATCH_RECORDS * CIFAR_RECORD_BYTES:
            raise FormatError(f"{path}: expected {CIFAR_BATCH_RECORDS} records "
                              f"of {CIFAR_RECORD_BYTES} bytes")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        batch_labels = records[:, 0].astype(np.int64)
        if batch_labels.max() > 9:
            raise FormatError(f"{path}: label out of range")
        labels.append(batch_labels)
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset("cifar10", np.concatenate(images), np.concatenate(labels), 10)


def make_blobs(classes: int, dim: int, per_class: int, separation: float,
               seed: int, name: str = "blobs") -> Dataset:
    """Isotropic Gaussian clusters with adjacent class means ``separation``
    apart, rescaled by a single affine map into [0, 1].

    Means sit equally spaced on a circle in the first two feature axes, so
    the geometry is identical for every seed; only the samples vary.
    """
    if dim < 2:
        raise ValueError("blobs need dim >= 2")
    if classes < 2 or per_class < 1:
        raise ValueError("need at least 2 classes and 1 sample per class")
    radius = separation / (2.0 * np.sin(np.pi / classes))
    means = np.zeros((classes, dim))
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)

    rng = RngStream(f"blobs/{name}", seed)
    samples = rng.normal((classes, per_class, dim)) + means[:, None, :]
    x = samples.reshape(classes * per_class, dim)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)

    lo, hi = x.min(), x.max()
    x = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return Dataset(name, x.reshape(-1, 1, 1, dim), labels, classes)


def dirichlet_partition(ds: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split sample indices across clients with per-class Dirichlet shares.

    For each class independently, proportions q ~ Dirichlet(omega * 1_N)
    are drawn and the class's shuffled samples are assigned contiguously
    using largest-remainder rounding, so the index sets are disjoint and
    cover the dataset exactly. Clients may end up empty for small classes.
    """
    if len(ds) == 0:
        raise ValueError("cannot partition an empty dataset")
    rng = RngStream("partition", spec.seed)
    n_clients = spec.client_count
    assigned: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for y in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == y)
        if idx.size == 0:
            raise ValueError(f"class {y} has no samples")
        q = rng.dirichlet(np.full(n_clients, spec.omega))
        perm = idx[rng.permutation(idx.size)]
        counts = _largest_remainder(q, idx.size)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        for i in range(n_clients):
            assigned[i].append(perm[offsets[i]:offsets[i + 1]])
    return [np.sort(np.concatenate(parts)).astype(np.int64) for parts in assigned]


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer apportionment of ``total`` by ``proportions`` (sums exactly)."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # ties broken toward the lowest index by stable sort
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def count_labels(ds: Dataset, indices: np.ndarray) -> LabelCounter:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(ds)):
        raise IndexError("sample index out of range")
    counts = np.bincount(ds.labels[idx], minlength=ds.class_count)
    return LabelCounter(counts.astype(np.int64))


def aggregate_label_distribution(counters: list[LabelCounter]) -> LabelDistribution:
    """Pooled class distribution over clients; uniform when all-zero."""
    if not counters:
        raise ValueError("need at least one counter")
    totals = np.sum([c.counts for c in counters], axis=0).astype(np.float64)
    grand = totals.sum()
    if grand == 0:
        return LabelDistribution(np.full(totals.size, 1.0 / totals.size))
    return LabelDistribution(totals / grand)


def split_test_evenly(test: Dataset, n_clients: int, seed: int) -> list[np.ndarray]:
    """Shuffle test indices and deal them into near-equal disjoint shards."""
    if len(test) == 0:
        raise ValueError("empty test set")
    rng = RngStream("testsplit", seed)
    perm = rng.permutation(len(test))
    sizes = np.full(n_clients, len(test) // n_clients, dtype=np.int64)
    sizes[:len(test) % n_clients] += 1
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return [np.sort(perm[offsets[i]:offsets[i + 1]]).astype(np.int64)
            for i in range(n_clients)]
