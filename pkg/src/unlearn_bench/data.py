"""Deterministic dataset synthesis and loading (Gaussian blobs, IDX, CSV)."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Dataset

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    cluster_count: int = 8
    per_cluster: int = 500
    dim: int = 10
    spread: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.cluster_count < 2:
            raise ValueError("cluster_count must be >= 2")
        if self.per_cluster < 1:
            raise ValueError("per_cluster must be >= 1")
        if self.dim < 1 or self.spread < 0:
            raise ValueError("dim must be positive and spread non-negative")


def synth_gaussians(spec: SynthSpec) -> Dataset:
    """Isotropic blobs around unit-norm random centres; label is the blob index.

    Rows are grouped by cluster (cluster 0 first); ids are 0..n-1.
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.cluster_count, spec.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.standard_normal((spec.cluster_count, spec.per_cluster, spec.dim))
    X = centers[:, None, :] + spec.spread * noise
    y = np.repeat(np.arange(spec.cluster_count), spec.per_cluster)
    return Dataset(X.reshape(-1, spec.dim), y)


def _read_header(f, magic, ndims, path):
    raw = f.read(4 + 4 * ndims)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{path}: bad magic number {got} (expected {magic})")
    if len(raw) != 4 + 4 * ndims:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack(f">{ndims}I", raw[4:])


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        count, rows, cols = _read_header(f, IDX_IMAGES_MAGIC, 3, images_path)
        pixels = np.frombuffer(f.read(), dtype=np.uint8)
    if pixels.size != count * rows * cols:
        raise FormatError(f"{images_path}: expected {count * rows * cols} pixel bytes, got {pixels.size}")
    with open(labels_path, "rb") as f:
        (n_labels,) = _read_header(f, IDX_LABELS_MAGIC, 1, labels_path)
        labels = np.frombuffer(f.read(), dtype=np.uint8)
    if n_labels != count or labels.size != count:
        raise FormatError(f"label count {labels.size} does not match image count {count}")
    X = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Rows of feature columns followed by an integer label; no header."""
    feats, labels = [], []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row[:-1]]
                label_f = float(row[-1])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
            if not label_f.is_integer():
                raise FormatError(f"{path}:{lineno}: label {row[-1]!r} is not an integer")
            label = int(label_f)
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise FormatError(f"{path}:{lineno}: label {label} out of range")
            if feats and len(values) != len(feats[0]):
                raise FormatError(f"{path}:{lineno}: expected {len(feats[0])} features")
            feats.append(values)
            labels.append(label)
    if not feats:
        raise FormatError(f"{path}: no rows")
    return Dataset(np.array(feats), np.array(labels))


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random partition; the test part gets round(n * test_fraction) rows."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return dataset.take(train_idx), dataset.take(test_idx)


def load_source(source: dict, base: Path | None = None) -> Dataset:
    """Dataset from a config mapping: ``{"kind": "synthetic"|"idx"|"csv", ...}``."""
    kind = source.get("kind", "synthetic")
    base = Path(base or ".")
    if kind == "synthetic":
        keys = ("cluster_count", "per_cluster", "dim", "spread", "seed")
        return synth_gaussians(SynthSpec(**{k: source[k] for k in keys if k in source}))
    if kind == "idx":
        return load_idx(base / source["images"], base / source["labels"])
    if kind == "csv":
        return load_csv(base / source["path"], source.get("n_classes"))
    raise ValueError(f"unknown dataset kind {kind!r}")
