"""Dataset ingestion, device partitioning and mini-batch sampling."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng as rngs

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised when an IDX file has the wrong magic number or a truncated body."""


class ConsistencyError(ValueError):
    """Raised when image and label files disagree or are empty."""


@dataclass(frozen=True)
class ExampleStore:
    """Labeled examples held as a dense feature matrix.

    ``features`` is ``(n, d)`` float64 scaled to [0, 1]; ``labels`` is ``(n,)``
    int64 in ``[0, num_classes)``.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ConsistencyError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range for num_classes")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def example(self, i: int) -> tuple[np.ndarray, int]:
        return self.features[i], int(self.labels[i])

    def subset(self, indices: Sequence[int]) -> "ExampleStore":
        idx = np.asarray(indices, dtype=np.int64)
        return ExampleStore(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class DevicePartition:
    device_id: int
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class MiniBatch:
    round: int
    device_id: int
    indices: np.ndarray


# ---------------------------------------------------------------------------
# IDX parsing
# ---------------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count = struct.unpack(">II", header)
        if magic != expected_magic:
            raise IdxFormatError(
                f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
            )
        ndim = magic & 0xFF
        dims = [count]
        if ndim > 1:
            extra = f.read(4 * (ndim - 1))
            if len(extra) < 4 * (ndim - 1):
                raise IdxFormatError(f"{path}: truncated dimension header")
            dims.extend(struct.unpack(">" + "I" * (ndim - 1), extra))
        body = f.read()
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise IdxFormatError(f"{path}: body has {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> ExampleStore:
    """Parse an IDX image/label pair into an :class:`ExampleStore`.

    Pixels are divided by 255 and flattened row-wise; file order is kept.
    Gzipped files (``.gz`` suffix) are read transparently.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    if images.shape[0] == 0:
        raise ConsistencyError("IDX files contain zero examples")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return ExampleStore(features, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Synthetic task
# ---------------------------------------------------------------------------

def synthetic_task(
    n_train: int,
    n_test: int,
    num_features: int = 20,
    num_classes: int = 4,
    margin: float = 0.05,
    flip_prob: float = 0.05,
    seed: int = 0,
    spread: float = 0.25,
) -> tuple[ExampleStore, ExampleStore]:
    """Gaussian blob features labeled by a hidden linear rule.

    Features are ``clip(0.5 + spread * z, 0, 1)`` with ``z ~ N(0, I)``.  The label is
    the argmax of a hidden affine score; samples whose top-two score gap is
    below ``margin`` are rejected, then a ``flip_prob`` fraction of labels is
    replaced by a uniformly random class.  Train and test share the rule.
    """
    if n_train < 1 or n_test < 0:
        raise ValueError("n_train must be >= 1 and n_test >= 0")
    gen = rngs.stream(seed, rngs.SYNTHETIC)
    rule = gen.standard_normal((num_classes, num_features))
    total = n_train + n_test
    feats = np.empty((0, num_features))
    labels = np.empty(0, dtype=np.int64)
    while feats.shape[0] < total:
        z = gen.standard_normal((2 * total, num_features))
        x = np.clip(0.5 + spread * z, 0.0, 1.0)
        scores = (x - 0.5) @ rule.T
        top2 = np.sort(scores, axis=1)[:, -2:]
        keep = (top2[:, 1] - top2[:, 0]) >= margin
        feats = np.vstack([feats, x[keep]])
        labels = np.concatenate([labels, scores[keep].argmax(axis=1)])
    feats, labels = feats[:total], labels[:total]
    flip = gen.random(total) < flip_prob
    labels = labels.copy()
    labels[flip] = gen.integers(0, num_classes, size=int(flip.sum()))
    train = ExampleStore(feats[:n_train], labels[:n_train], num_classes)
    test = ExampleStore(feats[n_train:], labels[n_train:], num_classes)
    return train, test


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

def _size_of(store) -> int:
    return store if isinstance(store, (int, np.integer)) else len(store)


def partition_iid(store, num_devices: int, seed: int) -> list[DevicePartition]:
    """Shuffle and deal examples into ``num_devices`` near-equal partitions.

    Leftover examples go one each to devices ``0, 1, ...``.
    """
    n = _size_of(store)
    if num_devices <= 0 or num_devices > n:
        raise ValueError(f"num_devices must be in [1, {n}], got {num_devices}")
    perm = rngs.stream(seed, rngs.PARTITION).permutation(n)
    base, rem = divmod(n, num_devices)
    sizes = [base + (1 if d < rem else 0) for d in range(num_devices)]
    bounds = np.cumsum([0] + sizes)
    return [
        DevicePartition(d, np.sort(perm[bounds[d]:bounds[d + 1]]))
        for d in range(num_devices)
    ]


def partition_noniid_shards(
    store: ExampleStore, num_devices: int, shards_per_device: int, seed: int
) -> list[DevicePartition]:
    """Sort by label, cut into equal contiguous shards, deal shards at random."""
    if num_devices <= 0 or shards_per_device <= 0:
        raise ValueError("num_devices and shards_per_device must be positive")
    n = len(store)
    total_shards = num_devices * shards_per_device
    if n % total_shards:
        raise ValueError(f"{n} examples cannot be split into {total_shards} equal shards")
    shard_size = n // total_shards
    order = np.argsort(store.labels, kind="stable")
    shards = order.reshape(total_shards, shard_size)
    assignment = rngs.stream(seed, rngs.PARTITION).permutation(total_shards)
    assignment = assignment.reshape(num_devices, shards_per_device)
    return [
        DevicePartition(d, np.sort(shards[assignment[d]].ravel()))
        for d in range(num_devices)
    ]


def export_manifest(partitions: Sequence[DevicePartition], path) -> None:
    manifest = {str(p.device_id): p.indices.tolist() for p in partitions}
    Path(path).write_text(json.dumps(manifest, sort_keys=True))


def load_manifest(path) -> list[DevicePartition]:
    manifest = json.loads(Path(path).read_text())
    return [
        DevicePartition(int(k), np.asarray(v, dtype=np.int64))
        for k, v in sorted(manifest.items(), key=lambda kv: int(kv[0]))
    ]


# ---------------------------------------------------------------------------
# Mini-batches
# ---------------------------------------------------------------------------

def sample_minibatch(
    partition: DevicePartition, round_idx: int, batch_size: int, device_rng: np.random.Generator
) -> MiniBatch:
    """Draw ``batch_size`` indices uniformly without replacement from the partition."""
    if batch_size < 1 or batch_size > len(partition):
        raise ValueError(
            f"batch_size {batch_size} invalid for partition of size {len(partition)}"
        )
    idx = device_rng.choice(partition.indices, size=batch_size, replace=False)
    return MiniBatch(round_idx, partition.device_id, idx)


def epoch_batches(
    partition: DevicePartition, round_idx: int, batch_size: int, device_rng: np.random.Generator
) -> Iterator[MiniBatch]:
    """One pass over the partition in shuffled batches of exactly ``batch_size``.

    A trailing incomplete batch is dropped so every step uses the configured
    batch size.
    """
    if batch_size < 1 or batch_size > len(partition):
        raise ValueError(
            f"batch_size {batch_size} invalid for partition of size {len(partition)}"
        )
    perm = device_rng.permutation(partition.indices)
    for start in range(0, len(perm) - batch_size + 1, batch_size):
        yield MiniBatch(round_idx, partition.device_id, perm[start:start + batch_size])
