"""Datasets: synthetic blobs, IDX ingestion, heterogeneity partitioning,
coarse relabeling, and the RLTD container format.

RLTD layout (little-endian): magic "RLTD" | version u8 (0x01) |
n_classes u32 | inputs block | labels block, where a block is
rows u32 | cols u32 | row-major f64 values. Labels are stored as a
rows x 1 block of integral floats.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    DimensionMismatch,
    Truncated,
    UncoveredLabel,
)

RLTD_MAGIC = b"RLTD"
RLTD_VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledSet:
    """Inputs in [0, 1], one sample per row, with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if self.inputs.ndim != 2:
            raise DimensionMismatch("inputs must be rank 2")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise DimensionMismatch("labels must align with input rows")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise UncoveredLabel("label outside 0..n_classes-1")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "LabeledSet":
        return LabeledSet(self.inputs[index], self.labels[index], self.n_classes)

    def shuffled(self, rng: np.random.Generator) -> "LabeledSet":
        order = rng.permutation(len(self))
        return self.subset(order)


def gen_blobs(n_classes: int, per_class: int, dim: int, spread: float,
              seed: int) -> LabeledSet:
    """Balanced Gaussian clusters at seeded centers, clipped to [0, 1].

    Centers are redrawn until pairwise-separated so a small spread gives a
    linearly separable task.
    """
    if n_classes < 2 or dim < 2:
        raise DimensionMismatch("need n_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    min_gap = 0.45
    for _ in range(512):
        centers = rng.uniform(0.15, 0.85, size=(n_classes, dim))
        gaps = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() >= min_gap:
            break
        min_gap *= 0.98  # relax slowly so crowded configurations still finish
    inputs = np.empty((n_classes * per_class, dim))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for c in range(n_classes):
        sl = slice(c * per_class, (c + 1) * per_class)
        inputs[sl] = centers[c] + spread * rng.standard_normal((per_class, dim))
        labels[sl] = c
    np.clip(inputs, 0.0, 1.0, out=inputs)
    return LabeledSet(inputs, labels, n_classes)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise Truncated(f"{what}: expected {n} bytes, got {len(data)}")
    return data


def read_idx(images_path, labels_path) -> LabeledSet:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "image magic"))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagic(f"image magic 0x{magic:08x} != 0x{IDX_IMAGE_MAGIC:08x}")
        count, rows, cols = struct.unpack(">III", _read_exact(fh, 12, "image dims"))
        pixels = np.frombuffer(
            _read_exact(fh, count * rows * cols, "image data"), dtype=np.uint8)
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, "label magic"))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagic(f"label magic 0x{magic:08x} != 0x{IDX_LABEL_MAGIC:08x}")
        (label_count,) = struct.unpack(">I", _read_exact(fh, 4, "label count"))
        labels = np.frombuffer(_read_exact(fh, label_count, "label data"), dtype=np.uint8)
    if label_count != count:
        raise CountMismatch(f"{count} images but {label_count} labels")
    inputs = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    n_classes = int(labels.max()) + 1 if label_count else 1
    return LabeledSet(inputs, labels.astype(np.int64), n_classes)


def partition_noniid(dataset: LabeledSet, alpha: float,
                     seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Split into (device, server) with label-skew severity alpha in [0, 1].

    Even labels belong to the device, odd labels to the server. Each sample
    lands on its label's owner with probability alpha, otherwise on a
    uniformly random side; alpha = 0 is an i.i.d. split.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    owner = dataset.labels % 2  # 0 -> device, 1 -> server
    to_owner = rng.random(len(dataset)) < alpha
    random_side = rng.integers(0, 2, size=len(dataset))
    side = np.where(to_owner, owner, random_side)
    device_idx = np.flatnonzero(side == 0)
    server_idx = np.flatnonzero(side == 1)
    return dataset.subset(device_idx), dataset.subset(server_idx)


def relabel_coarse(dataset: LabeledSet, boundaries: list[int]) -> LabeledSet:
    """Bucket labels by inclusive upper bounds; labels above the last boundary
    fall into the final bucket. Bucket count is len(boundaries) + 1."""
    bounds = list(boundaries)
    if any(b >= bounds[i + 1] for i, b in enumerate(bounds[:-1])):
        raise ValueError("boundaries must be strictly increasing")
    if dataset.labels.size and dataset.labels.min() < 0:
        raise UncoveredLabel("negative labels cannot be bucketed")
    edges = np.asarray(bounds, dtype=np.int64)
    # side="left" counts boundaries strictly below y, so y == b lands in b's bucket.
    new_labels = np.searchsorted(edges, dataset.labels, side="left")
    return LabeledSet(dataset.inputs, new_labels, len(bounds) + 1)


def _write_block(parts: list[bytes], array: np.ndarray) -> None:
    rows, cols = array.shape
    parts.append(struct.pack("<II", rows, cols))
    parts.append(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_block(fh, what: str) -> np.ndarray:
    rows, cols = struct.unpack("<II", _read_exact(fh, 8, f"{what} header"))
    data = np.frombuffer(_read_exact(fh, rows * cols * 8, f"{what} data"), dtype="<f8")
    return data.reshape(rows, cols).copy()


def save_rltd(path, dataset: LabeledSet) -> None:
    parts = [RLTD_MAGIC, struct.pack("<BI", RLTD_VERSION, dataset.n_classes)]
    _write_block(parts, dataset.inputs)
    _write_block(parts, dataset.labels.astype(np.float64).reshape(-1, 1))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_rltd(path) -> LabeledSet:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != RLTD_MAGIC:
            raise BadMagic("not an RLTD file")
        version, n_classes = struct.unpack("<BI", _read_exact(fh, 5, "header"))
        if version != RLTD_VERSION:
            raise BadMagic(f"unsupported RLTD version {version}")
        inputs = _read_block(fh, "inputs")
        labels = _read_block(fh, "labels")
    if labels.shape != (inputs.shape[0], 1):
        raise CountMismatch("label block does not align with input rows")
    label_ints = labels[:, 0]
    if not np.all(label_ints == np.round(label_ints)):
        raise CountMismatch("labels must be integral")
    return LabeledSet(inputs, label_ints.astype(np.int64), n_classes)


def batches(dataset: LabeledSet, batch_size: int, rng: np.random.Generator):
    """Yield shuffled (inputs, labels) batches covering the dataset once."""
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.labels[idx]
