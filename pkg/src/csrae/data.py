"""Synthetic generators, IDX / CSV loaders, splits and binarization."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

NONE, STATIC, DYNAMIC = "none", "static", "dynamic"
BINARIZATION_POLICIES = (NONE, STATIC, DYNAMIC)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_SPLIT = (45000, 5000, 10000)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None  # (n, L) integer
    split: str = "all"
    binarization: str = NONE
    norm_range: tuple[float, float] | None = None
    indices: np.ndarray | None = None  # rows of the parent dataset

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.ndim == 1:
                labels = labels[:, None]
            if labels.shape[0] != self.features.shape[0]:
                raise ValueError("one label row per feature row required")
            if np.any(labels < 0) or np.any(labels != np.round(labels)):
                raise ValueError("labels must be non-negative integers")
            self.labels = labels.astype(np.int64)
        if self.binarization not in BINARIZATION_POLICIES:
            raise ValueError(f"unknown binarization policy {self.binarization!r}")
        if self.norm_range is not None and self.features.size:
            lo, hi = self.norm_range
            if self.features.min() < lo or self.features.max() > hi:
                raise ValueError(f"features outside the declared range [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, rows, split: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        parent = self.indices if self.indices is not None else np.arange(len(self))
        return replace(self, features=self.features[rows],
                       labels=None if self.labels is None else self.labels[rows],
                       split=split or self.split, indices=parent[rows])


def gen_two_gaussian_1d(n: int = 2000, rng_seed=None) -> Dataset:
    """Samples of ``0.5 N(-3, 1) + 0.5 N(3, 1)``; labels hold the component."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    comp = rng.integers(0, 2, size=n)
    x = np.where(comp == 1, 3.0, -3.0) + rng.standard_normal(n)
    return Dataset(x[:, None], comp)


def gen_pinwheel(n: int = 4000, clusters: int = 4, radial_std: float = 0.05,
                 tangential_std: float = 0.25, rate: float = 0.25, rng_seed=None) -> Dataset:
    """Spiral-warped Gaussian clusters around the unit circle.

    Each point starts as ``(1 + radial_std * e1, tangential_std * e2)`` and
    is rotated by ``2 pi k / clusters + rate * r`` where ``r`` is its radial
    coordinate.
    """
    if clusters < 1 or n % clusters:
        raise ValueError(f"n={n} is not divisible by clusters={clusters}")
    rng = np.random.default_rng(rng_seed)
    per = n // clusters
    pts = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
    pts[:, 0] += 1.0
    labels = np.repeat(np.arange(clusters), per)
    angle = 2.0 * np.pi * labels / clusters + rate * pts[:, 0]
    c, s = np.cos(angle), np.sin(angle)
    x = np.stack([c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1]], axis=1)
    return Dataset(x, labels)


# -- IDX ----------------------------------------------------------------------------

def _read_idx(path, magic: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise ValueError(f"{path}: truncated at byte {len(buf)} (need 4-byte magic)")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise ValueError(f"{path}: bad magic 0x{found:08x} at byte 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise ValueError(f"{path}: truncated header at byte {len(buf)}, need {head}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    need = head + int(np.prod(dims))
    if len(buf) < need:
        raise ValueError(f"{path}: truncated payload at byte {len(buf)}, need {need}")
    return np.frombuffer(buf, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read an IDX image file (and optional label file); pixels are scaled to [0, 1]."""
    img = _read_idx(images_path, IDX_IMAGES_MAGIC)
    x = img.reshape(img.shape[0], -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != x.shape[0]:
            raise ValueError(f"{labels.shape[0]} labels for {x.shape[0]} images")
    return Dataset(x, labels, norm_range=(0.0, 1.0))


def write_idx(images_path, images, labels_path=None, labels=None) -> None:
    """Write ``uint8`` images of shape ``(n, rows, cols)`` (and labels) in IDX format."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError("images must have shape (n, rows, cols)")
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    if labels_path is not None:
        lab = np.asarray(labels, dtype=np.uint8).ravel()
        Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, lab.size) + lab.tobytes())


# -- splits and binarization ------------------------------------------------------

def split(dataset: Dataset, counts: Sequence[int] = MNIST_SPLIT, rng_seed=None) -> tuple[Dataset, ...]:
    """Disjoint seeded shuffle split into ``len(counts)`` parts (train, val, test)."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts) or sum(counts) > len(dataset):
        raise ValueError(f"split sizes {counts} exceed the {len(dataset)} available rows")
    perm = np.random.default_rng(rng_seed).permutation(len(dataset))
    names = ("train", "val", "test") if len(counts) == 3 else tuple(f"part{i}" for i in range(len(counts)))
    parts, start = [], 0
    for c, name in zip(counts, names):
        parts.append(dataset.subset(np.sort(perm[start:start + c]), split=name))
        start += c
    return tuple(parts)


def binarize(batch, policy: str, epoch: int = 0, rng_seed: int = 0, batch_index: int = 0) -> np.ndarray:
    """Binarize intensities in [0, 1].

    ``static`` thresholds at 0.5; ``dynamic`` draws ``Bernoulli(pixel)`` with
    a generator seeded from ``(rng_seed, epoch, batch_index)``; ``none``
    returns the batch unchanged.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("binarization needs values in [0, 1]")
    if policy == NONE:
        return x.copy()
    if policy == STATIC:
        return (x >= 0.5).astype(np.float64)
    if policy == DYNAMIC:
        rng = np.random.default_rng([int(rng_seed), int(epoch), int(batch_index)])
        return (rng.random(x.shape) < x).astype(np.float64)
    raise ValueError(f"unknown binarization policy {policy!r}")


# -- CSV ---------------------------------------------------------------------------

def load_csv_labeled(path, label_columns: Sequence, header: bool = False) -> Dataset:
    """Read a numeric CSV; ``label_columns`` (indices, or names with ``header``) become labels."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if header:
        if not rows:
            raise ValueError(f"{path}: empty file")
        names, rows = rows[0], rows[1:]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    cols = []
    for c in label_columns:
        if isinstance(c, str):
            if not header or c not in names:
                raise ValueError(f"unknown label column {c!r}")
            c = names.index(c)
        if not 0 <= int(c) < width:
            raise ValueError(f"label column {c} out of range for {width} columns")
        cols.append(int(c))
    first = 2 if header else 1
    values = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        line = i + first
        if len(row) != width:
            raise ValueError(f"{path}: row {line} has {len(row)} cells, expected {width}")
        try:
            values[i] = [float(v) for v in row]
        except ValueError as exc:
            raise ValueError(f"{path}: non-numeric cell in row {line}") from exc
    feat_cols = [j for j in range(width) if j not in cols]
    labels = values[:, cols] if cols else None
    return Dataset(values[:, feat_cols], labels)
