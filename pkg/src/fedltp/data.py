"""Datasets, IDX I/O, Dirichlet client partitioning and per-client splits."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DataFormatError, InvalidInputError
from .rng import stream

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_UBYTE = 0x08


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("features must be (n, dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidInputError("labels out of class range")

    def __len__(self):
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.class_count)


@dataclass
class ClientShards:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


# -- IDX --------------------------------------------------------------------

def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte IDX file (MNIST container)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InvalidInputError("only unsigned-byte IDX files are supported")
    header = struct.pack(">BBBB", 0, 0, _IDX_UBYTE, array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(header + array.tobytes(order="C"))


def read_idx(path, expected_magic=None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError("file too short for an IDX header", offset=len(raw), path=path)
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    magic = (type_code << 8) | ndim
    if zero != 0 or type_code != _IDX_UBYTE:
        raise DataFormatError(f"bad IDX magic 0x{struct.unpack('>I', raw[:4])[0]:08x}",
                              offset=0, path=path)
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"expected IDX magic 0x{expected_magic:08x}, got 0x{magic:08x}",
                              offset=0, path=path)
    if ndim == 0:
        raise DataFormatError("IDX file declares zero dimensions", offset=3, path=path)
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise DataFormatError("truncated dimension table", offset=len(raw), path=path)
    dims = struct.unpack(">" + "I" * ndim, raw[4:end])
    expected = int(np.prod(dims, dtype=np.int64))
    if len(raw) - end != expected:
        raise DataFormatError(
            f"dimensions {dims} need {expected} data bytes, found {len(raw) - end}",
            offset=end, path=path)
    return np.frombuffer(raw, dtype=np.uint8, offset=end).reshape(dims)


def load_idx_pair(images_path, labels_path, class_count=None) -> Dataset:
    """Images flattened and scaled to [0, 1]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4, path=labels_path)
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 0
    return Dataset(features, labels.astype(np.int64), class_count)


# -- synthetic --------------------------------------------------------------

def make_blobs(classes: int, dim: int, separation: float, size: int,
               rng: np.random.Generator) -> Dataset:
    """Isotropic unit-variance Gaussian clusters.

    Class centres sit on orthonormal random directions (when ``dim >=
    classes``) scaled so every pair of centres is ``separation`` apart.
    """
    if classes < 2 or dim < 1 or size < 1:
        raise InvalidInputError("blobs need >= 2 classes, dim >= 1 and size >= 1")
    if dim >= classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        centres = q.T * (separation / np.sqrt(2.0))
    else:
        dirs = rng.standard_normal((classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centres = dirs * (separation / 2.0)
    labels = np.arange(size) % classes
    labels = labels[rng.permutation(size)]
    features = centres[labels] + rng.standard_normal((size, dim))
    return Dataset(features, labels, classes)


def load_or_synthesize(kind: str, *, images=None, labels=None, classes: int = 10,
                       dim: int = 20, separation: float = 4.0, size: int = 1000,
                       seed: int = 0) -> Dataset:
    """``kind="idx"`` reads an image/label file pair; ``kind="blobs"`` builds
    the synthetic set from its recipe and ``seed``."""
    if kind == "idx":
        if not images or not labels:
            raise InvalidInputError("IDX data needs both an images and a labels path")
        return load_idx_pair(images, labels)
    if kind == "blobs":
        return make_blobs(classes, dim, separation, size, stream(seed, "blobs"))
    raise InvalidInputError(f"unknown data source {kind!r}")


# -- partitioning -----------------------------------------------------------

def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, clients: int, alpha: float,
                        rng: np.random.Generator) -> List[np.ndarray]:
    """Deal each class to clients by ``Dir(alpha)`` proportions."""
    labels = np.asarray(labels)
    if clients < 1:
        raise InvalidInputError("need at least one client")
    if not alpha > 0:
        raise InvalidInputError("Dirichlet concentration must be positive")
    if labels.size < clients:
        raise InvalidInputError(f"{labels.size} examples cannot cover {clients} clients")

    buckets: List[List[int]] = [[] for _ in range(clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        props = rng.dirichlet(np.full(clients, float(alpha)))
        counts = largest_remainder(idx.size, props)
        start = 0
        for i, n in enumerate(counts):
            buckets[i].extend(idx[start:start + n].tolist())
            start += n

    for i in range(clients):
        if not buckets[i]:
            donor = max(range(clients), key=lambda j: len(buckets[j]))
            buckets[i].append(buckets[donor].pop())
            log.info("client %d was empty; moved one example from client %d", i, donor)
    return [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]


def split_train_val_test(indices, labels, fractions: Tuple[float, float, float],
                         rng: np.random.Generator):
    """Stratified split of ``indices`` into train/val/test index arrays."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError("fractions must be three non-negative numbers summing to 1")
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels)
    parts = ([], [], [])
    for c in np.unique(labels[indices]):
        idx = indices[labels[indices] == c]
        idx = idx[rng.permutation(idx.size)]
        n = idx.size
        n_val = int(np.floor(fractions[1] * n + 0.5))
        n_test = int(np.floor(fractions[2] * n + 0.5))
        # train keeps at least one example whenever it is meant to get any
        while fractions[0] > 0 and n - n_val - n_test < 1 and (n_val or n_test):
            if n_test >= n_val and n_test:
                n_test -= 1
            else:
                n_val -= 1
        if n < 3:
            log.debug("class %s has only %d example(s); split best-effort", c, n)
        n_train = n - n_val - n_test
        parts[0].extend(idx[:n_train].tolist())
        parts[1].extend(idx[n_train:n_train + n_val].tolist())
        parts[2].extend(idx[n_train + n_val:].tolist())
    return tuple(np.sort(np.asarray(p, dtype=np.int64)) for p in parts)


def carve_public(dataset: Dataset, fraction: float, rng: np.random.Generator):
    """Split one dataset into disjoint ``(public, private)`` pools."""
    if not 0.0 < fraction < 1.0:
        raise InvalidInputError("public fraction must lie in (0, 1)")
    perm = rng.permutation(len(dataset))
    n_pub = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(perm[:n_pub])), dataset.subset(np.sort(perm[n_pub:]))
