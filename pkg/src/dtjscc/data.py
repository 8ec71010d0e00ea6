"""MNIST IDX ingestion, synthetic Gaussian blobs and mini-batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError, SpecError, StructuralError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    samples: np.ndarray  # (N, width) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if self.samples.ndim != 2 or len(self.samples) != len(self.labels):
            raise StructuralError("samples and labels disagree in count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise StructuralError("label outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_width(self) -> int:
        return self.samples.shape[1]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.samples[:n], self.labels[:n], self.class_count)


def _read_header(blob: bytes, magic: int, ndims: int, field: str) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(blob) < need:
        raise FormatError(f"{field}: truncated header", section=f"{field}.header")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise FormatError(f"{field}: bad magic {found}, expected {magic}", section=f"{field}.magic")
    return struct.unpack(f">{ndims}I", blob[4:need])


def parse_idx_images(blob: bytes) -> np.ndarray:
    n, rows, cols = _read_header(blob, IMAGES_MAGIC, 3, "images")
    if (rows, cols) != (28, 28):
        raise FormatError(f"images: expected 28x28, got {rows}x{cols}", section="images.dims")
    payload = blob[16:]
    if len(payload) != n * rows * cols:
        raise FormatError(f"images: payload has {len(payload)} bytes, header implies "
                          f"{n * rows * cols}", section="images.payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols)


def parse_idx_labels(blob: bytes) -> np.ndarray:
    (n,) = _read_header(blob, LABELS_MAGIC, 1, "labels")
    payload = blob[8:]
    if len(payload) != n:
        raise FormatError(f"labels: payload has {len(payload)} bytes, header implies {n}",
                          section="labels.payload")
    return np.frombuffer(payload, dtype=np.uint8)


def write_idx_images(images: np.ndarray) -> bytes:
    n, rows, cols = images.shape
    return struct.pack(">4I", IMAGES_MAGIC, n, rows, cols) + images.astype(np.uint8).tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if len(images) != len(labels):
        raise FormatError(f"count mismatch: {len(images)} images, {len(labels)} labels",
                          section="count")
    x = images.reshape(len(images), -1).astype(np.float32) / np.float32(255.0)
    return Dataset(x, labels.astype(np.int64), 10)


def load_mnist(directory, split: str = "train") -> Dataset:
    images, labels = MNIST_FILES[split]
    directory = Path(directory)
    return load_mnist_idx(directory / images, directory / labels)


@dataclass
class SyntheticSpec:
    class_count: int = 10
    input_width: int = 32
    noise_std: float = 0.05
    samples_per_class: int = 200
    seed: int = 0
    centers: np.ndarray | None = None  # (class_count, input_width) unit rows; drawn if None
    min_center_distance: float = 1.0

    def resolved_centers(self) -> np.ndarray:
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=np.float64)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
            c = rng.standard_normal((self.class_count, self.input_width))
            c /= np.linalg.norm(c, axis=1, keepdims=True)
        if c.shape != (self.class_count, self.input_width):
            raise SpecError(f"centers have shape {c.shape}")
        if not np.allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-9):
            raise SpecError("cluster centers must have unit norm")
        dist = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
        dist[np.diag_indices(len(c))] = np.inf
        if dist.min() < self.min_center_distance:
            raise SpecError(f"closest centers are {dist.min():.3f} apart "
                            f"(< {self.min_center_distance})")
        return c


def _rescale(x: np.ndarray) -> np.ndarray:
    # unit-norm centres lie in [-1, 1]; map that box onto [0, 1]
    return np.clip(0.5 * x + 0.5, 0.0, 1.0).astype(np.float32)


def synthetic_blobs(spec: SyntheticSpec, split: str = "train") -> Dataset:
    """Gaussian clusters around unit-norm centres, rescaled into [0, 1].

    ``split`` selects an independent sample stream over the same centres.
    """
    centers = spec.resolved_centers()
    stream = {"train": 1, "test": 2}[split]
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream]))
    labels = np.repeat(np.arange(spec.class_count), spec.samples_per_class)
    x = centers[labels]
    if spec.noise_std > 0:
        x = x + spec.noise_std * rng.standard_normal(x.shape)
    order = rng.permutation(len(labels))
    return Dataset(_rescale(x[order]), labels[order].astype(np.int64), spec.class_count)


def synthetic_centers(spec: SyntheticSpec) -> np.ndarray:
    """Cluster centres in the same [0, 1] coordinates as the samples."""
    return _rescale(spec.resolved_centers())


def batch_indices(n: int, batch_size: int, shuffle_seed: int | None) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise StructuralError("batch size must be at least 1")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def batches(dataset: Dataset, batch_size: int,
            shuffle_seed: int | None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of mini-batches; the final partial batch is kept."""
    for idx in batch_indices(len(dataset), batch_size, shuffle_seed):
        yield dataset.samples[idx], dataset.labels[idx]
