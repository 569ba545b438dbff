"""MNIST IDX loading, synthetic image data and client partitioning."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from ._rng import as_generator
from .exceptions import ConfigError, DomainError, FormatError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
GZIP_MAGIC = b"\x1f\x8b"


@dataclass
class Dataset:
    """Images ``[N, 1, H, W]`` scaled to [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise DomainError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DomainError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DomainError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.n_classes)

    def head(self, n):
        return self if n is None or n >= len(self) else self.subset(np.arange(n))


def _read_all(source):
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
    elif isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as f:
            data = f.read()
    else:
        data = source.read()
    if data[:2] == GZIP_MAGIC:
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise FormatError(f"corrupt gzip stream: {exc}") from exc
    return data


def _parse_idx(data, magic, ndims, kind):
    header = 4 + 4 * ndims
    if len(data) < 4:
        raise FormatError(f"{kind} stream too short for an IDX header ({len(data)} bytes)")
    (found,) = struct.unpack_from(">I", data, 0)
    if found != magic:
        raise FormatError(f"bad {kind} magic {found}, expected {magic}")
    if len(data) < header:
        raise FormatError(f"truncated {kind} header: need {header} bytes, have {len(data)}")
    dims = struct.unpack_from(f">{ndims}I", data, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(data) < expected:
        raise FormatError(f"truncated {kind} payload: expected {expected} bytes, got {len(data)}")
    return dims, np.frombuffer(data, dtype=np.uint8, count=expected - header, offset=header)


def load_idx_images(source):
    """Decode an IDX image file (raw or gzipped) into ``[N, 1, rows, cols]`` floats in [0, 1]."""
    (n, rows, cols), raw = _parse_idx(_read_all(source), IMAGE_MAGIC, 3, "image")
    return raw.reshape(n, 1, rows, cols).astype(np.float64) / 255.0


def load_idx_labels(source):
    (n,), raw = _parse_idx(_read_all(source), LABEL_MAGIC, 1, "label")
    return raw.astype(np.int64)


def idx_image_bytes(images):
    images = np.asarray(images)
    n, rows, cols = images.shape[0], images.shape[-2], images.shape[-1]
    raw = np.clip(np.rint(images.reshape(n, rows, cols) * 255.0), 0, 255).astype(np.uint8)
    return struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + raw.tobytes()


def idx_label_bytes(labels):
    labels = np.asarray(labels)
    return struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(directory, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, split="train", limit=None):
    """Load the MNIST ``train`` or ``test`` split from a directory of IDX files."""
    images_name, labels_name = MNIST_FILES[split]
    images = load_idx_images(_find(directory, images_name))
    labels = load_idx_labels(_find(directory, labels_name))
    return Dataset(images, labels, 10).head(limit)


def synthetic_dataset(n, classes=10, rng=None, image_size=28, noise=0.25):
    """Class-conditional Gaussian blobs rendered as ``image_size`` x ``image_size`` images.

    Each class owns a random prototype made of three bright Gaussian spots; a
    sample is its class prototype under a random brightness, plus pixel noise,
    clipped to [0, 1].  Labels are balanced to within one.
    """
    if n < classes:
        raise DomainError(f"n={n} must be at least classes={classes}")
    rng = as_generator(rng)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / (image_size - 1)
    protos = np.zeros((classes, image_size, image_size))
    for c in range(classes):
        for cy, cx in rng.uniform(0.15, 0.85, size=(3, 2)):
            protos[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08 ** 2))
    protos = np.clip(protos, 0, 1)
    labels = rng.permutation(np.arange(n) % classes)
    scale = rng.uniform(0.7, 1.0, size=(n, 1, 1))
    images = protos[labels] * scale + rng.normal(0.0, noise, size=(n, image_size, image_size))
    images = np.clip(images, 0.0, 1.0)[:, None]
    return Dataset(images, labels, classes)


@dataclass(frozen=True)
class IID:
    pass


@dataclass(frozen=True)
class NonIIDEqual:
    shards_per_client: int = 2

    def __post_init__(self):
        if self.shards_per_client < 1:
            raise ConfigError("shards_per_client must be >= 1")


@dataclass(frozen=True)
class NonIIDUnequal:
    min_shards: int = 1
    max_shards: int = 4

    def __post_init__(self):
        if not 1 <= self.min_shards <= self.max_shards:
            raise ConfigError("need 1 <= min_shards <= max_shards")


def _labels_of(data):
    return data.labels if isinstance(data, Dataset) else np.asarray(data)


def _label_sorted_shards(labels, n_shards):
    n = len(labels)
    if n_shards > n or n % n_shards:
        raise ConfigError(f"{n} samples cannot be cut into {n_shards} equal shards")
    order = np.argsort(labels, kind="stable")  # ties keep original index order
    return order.reshape(n_shards, n // n_shards)


def _deal(first, rest, targets, rng):
    """One shard per client from ``first``, then ``rest`` to random clients below target."""
    owned = [[s] for s in first]
    counts = np.ones(len(targets), dtype=np.int64)
    for shard in rest:
        open_ = np.flatnonzero(counts < targets)
        if open_.size == 0:
            break
        c = open_[rng.integers(open_.size)]
        owned[c].append(shard)
        counts[c] += 1
    return owned


def partition(data, scheme, clients, rng=None):
    """Map client id -> sorted sample indices.

    ``data`` is a Dataset or a label array.  IID shuffles and splits into
    near-equal chunks.  Both non-IID schemes cut the label-sorted indices into
    equal shards, give every client one shard first and then hand out the
    remaining shards at random.
    """
    labels = _labels_of(data)
    n = len(labels)
    if clients < 1:
        raise ConfigError("clients must be >= 1")
    rng = as_generator(rng)

    if isinstance(scheme, IID):
        if clients > n:
            raise ConfigError(f"{clients} clients but only {n} samples")
        chunks = np.array_split(rng.permutation(n), clients)
        return {c: sorted(int(i) for i in chunk) for c, chunk in enumerate(chunks)}

    if isinstance(scheme, NonIIDEqual):
        shards = _label_sorted_shards(labels, clients * scheme.shards_per_client)
        order = rng.permutation(len(shards))
        targets = np.full(clients, scheme.shards_per_client)
    elif isinstance(scheme, NonIIDUnequal):
        shards = _label_sorted_shards(labels, clients * scheme.max_shards)
        order = rng.permutation(len(shards))
        lo, hi = scheme.min_shards, scheme.max_shards
        while True:
            targets = rng.integers(lo, hi + 1, size=clients)
            if clients < 2 or hi == lo or np.unique(targets).size > 1:
                break
    else:
        raise ConfigError(f"unknown partition scheme {scheme!r}")

    owned = _deal(order[:clients], order[clients:], targets, rng)
    return {
        c: sorted(int(i) for s in owned[c] for i in shards[s]) for c in range(clients)
    }


def scheme_from_name(name, shards_per_client=2, min_shards=1, max_shards=4):
    if name == "iid":
        return IID()
    if name == "noniid_equal":
        return NonIIDEqual(shards_per_client)
    if name == "noniid_unequal":
        return NonIIDUnequal(min_shards, max_shards)
    raise ConfigError(f"unknown partition scheme {name!r}")
