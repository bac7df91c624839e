"""Dataset ingestion, client partitioning, and synthetic data.

Supports the IDX binary container (big-endian, magic 0x803/0x801) and a
generic little-endian raw tensor container ("BFELDATA") for everything
else. Partitioning covers seeded iid splits and the label-sorted shard
protocol for non-iid clients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .models import Batch, Tensor

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
BFELDATA_MAGIC = b"BFELDATA"
BFELDATA_VERSION = 1


class DataFormatError(ValueError):
    """A dataset file failed to parse."""


class PartitionError(ValueError):
    """A partition plan cannot be satisfied."""


@dataclass(frozen=True)
class Dataset:
    """Stack of samples with integer class labels."""

    samples: np.ndarray  # (N, ...) float64
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.shape[0] != labels.shape[0]:
            raise DataFormatError(
                f"{samples.shape[0]} samples but {labels.shape[0]} labels"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DataFormatError("label out of range")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.samples[indices], self.labels[indices], self.class_count)

    def as_batch(self) -> Batch:
        return Batch(Tensor(self.samples), self.labels)

    def sample_batch(self, i: int) -> Batch:
        return Batch(Tensor(self.samples[i : i + 1]), self.labels[i : i + 1])


class PartitionMode(Enum):
    IID = "iid"
    NONIID_SHARDS = "noniid_shards"


@dataclass(frozen=True)
class PartitionPlan:
    client_count: int
    mode: PartitionMode
    shards_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.client_count < 1:
            raise PartitionError("client_count must be >= 1")
        if self.mode is PartitionMode.NONIID_SHARDS and self.shards_per_client < 1:
            raise PartitionError("shards_per_client must be >= 1")


def _read_exact(f, n: int, path) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"{path}: truncated file (wanted {n} more bytes)")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair; pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(f, 16, images_path)
        )
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, count * rows * cols, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        labels = np.frombuffer(_read_exact(f, label_count, labels_path), dtype=np.uint8)
    if label_count != count:
        raise DataFormatError(
            f"count mismatch: {count} images vs {label_count} labels"
        )
    classes = int(labels.max()) + 1 if count else 1
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), classes)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset of 2-D samples back out as an IDX pair (test fixture aid)."""
    samples = dataset.samples
    if samples.ndim != 3:
        raise DataFormatError("IDX export requires (N, rows, cols) samples")
    n, rows, cols = samples.shape
    pixels = np.clip(np.rint(samples * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def save_bfeldata(dataset: Dataset, path) -> None:
    """Write the little-endian raw tensor container."""
    shape = dataset.samples.shape[1:]
    with open(path, "wb") as f:
        f.write(BFELDATA_MAGIC)
        f.write(struct.pack("<IQI", BFELDATA_VERSION, len(dataset), len(shape)))
        for dim in shape:
            f.write(struct.pack("<Q", dim))
        f.write(struct.pack("<I", dataset.class_count))
        f.write(dataset.samples.astype("<f8").tobytes())
        f.write(dataset.labels.astype("<u2").tobytes())


def load_bfeldata(path) -> Dataset:
    """Read the little-endian raw tensor container."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 8, path)
        if magic != BFELDATA_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}")
        version, count, ndim = struct.unpack("<IQI", _read_exact(f, 16, path))
        if version != BFELDATA_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        shape = tuple(
            struct.unpack("<Q", _read_exact(f, 8, path))[0] for _ in range(ndim)
        )
        class_count = struct.unpack("<I", _read_exact(f, 4, path))[0]
        per = int(np.prod(shape)) if shape else 1
        samples = np.frombuffer(
            _read_exact(f, count * per * 8, path), dtype="<f8"
        ).reshape((count,) + shape)
        labels = np.frombuffer(_read_exact(f, count * 2, path), dtype="<u2")
    return Dataset(samples, labels.astype(np.int64), class_count)


def partition(dataset: Dataset, plan: PartitionPlan) -> list[Dataset]:
    """Split a dataset into disjoint, exhaustive per-client datasets."""
    n = len(dataset)
    rng = np.random.default_rng(plan.seed)
    if plan.mode is PartitionMode.IID:
        order = rng.permutation(n)
        splits = np.array_split(order, plan.client_count)
    else:
        shard_count = plan.client_count * plan.shards_per_client
        if shard_count > n:
            raise PartitionError(
                f"{shard_count} shards requested from {n} samples"
            )
        by_label = np.argsort(dataset.labels, kind="stable")
        shards = np.array_split(by_label, shard_count)
        shard_order = rng.permutation(shard_count)
        splits = [
            np.concatenate(
                [
                    shards[shard_order[c * plan.shards_per_client + s]]
                    for s in range(plan.shards_per_client)
                ]
            )
            for c in range(plan.client_count)
        ]
    parts = [dataset.subset(np.sort(idx)) for idx in splits]
    if any(len(p) == 0 for p in parts):
        raise PartitionError("partition left a client with no samples")
    return parts


def synth_blobs(
    class_count: int, per_class: int, dim: int, spread: float, seed: int
) -> Dataset:
    """Gaussian clusters at seeded random centers; labels = cluster index."""
    if class_count < 1 or per_class < 1 or dim < 1:
        raise ValueError("class_count, per_class and dim must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.0, 1.0, size=(class_count, dim))
    samples = np.concatenate(
        [
            centers[c] + spread * rng.standard_normal((per_class, dim))
            for c in range(class_count)
        ]
    )
    labels = np.repeat(np.arange(class_count), per_class)
    return Dataset(samples, labels, class_count)


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering [0, n) in seeded-shuffled order."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
