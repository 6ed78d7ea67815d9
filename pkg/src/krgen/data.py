"""Dataset generation, IDX ingestion and label corruption."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInput

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Inputs ``x`` (n, p) with regression targets (n, k) or integer labels (n,)."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int | None = None

    def __len__(self):
        return self.x.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.num_classes is not None

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx])

    def flat_samples(self, idx=None) -> np.ndarray:
        """Concatenate ``(x_i, y_i)`` pairs in index order into one vector."""
        x = self.x if idx is None else self.x[idx]
        y = self.y if idx is None else self.y[idx]
        y = y.reshape(x.shape[0], -1).astype(np.float64)
        return np.concatenate([x, y], axis=1).reshape(-1)


def synthetic_truth(seed, dim: int = 10) -> np.ndarray:
    """Linear coefficient shared by every run of one experiment."""
    return np.random.default_rng(seed).standard_normal(dim)


def gen_synthetic(n: int, seed, true_w=None, noise_var: float = 0.01, dim: int = 10) -> tuple[Dataset, Dataset]:
    """Draw a train and an equally sized test set from ``y = w·x + eps``.

    ``x ~ N(0, I)``, ``eps ~ N(0, noise_var)``. When ``true_w`` is omitted it
    is drawn from ``seed`` itself.
    """
    if n < 1:
        raise InvalidInput("n must be >= 1")
    if true_w is None:
        true_w = synthetic_truth(seed, dim)
    true_w = np.asarray(true_w, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2 * n, true_w.size))
    eps = rng.standard_normal(2 * n) * np.sqrt(noise_var)
    y = (x @ true_w + eps)[:, None]
    return Dataset(x[:n], y[:n]), Dataset(x[n:], y[n:])


def gen_classification(n: int, seed, centers: np.ndarray, spread: float = 1.0) -> tuple[Dataset, Dataset]:
    """Gaussian-blob classification: label uniform, ``x ~ N(center[label], spread² I)``.

    Returns a train and an equally sized test set.
    """
    if n < 1:
        raise InvalidInput("n must be >= 1")
    centers = np.asarray(centers, dtype=np.float64)
    k, p = centers.shape
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=2 * n)
    x = centers[labels] + spread * rng.standard_normal((2 * n, p))
    return (
        Dataset(x[:n], labels[:n], k),
        Dataset(x[n:], labels[n:], k),
    )


def blob_centers(seed, num_classes: int, dim: int, scale: float = 1.0) -> np.ndarray:
    return scale * np.random.default_rng(seed).standard_normal((num_classes, dim))


def corrupt_labels(dataset: Dataset, rho: float, seed) -> Dataset:
    """Replace each label, with probability ``rho``, by a uniform draw over all classes."""
    if not dataset.is_classification:
        raise InvalidInput("label corruption needs a classification dataset")
    if not 0.0 <= rho <= 1.0:
        raise InvalidInput("rho must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    mask = rng.random(len(dataset)) < rho
    fresh = rng.integers(0, dataset.num_classes, size=len(dataset))
    y = np.where(mask, fresh, dataset.y)
    return replace(dataset, y=y)


def _open(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse an IDX byte buffer holding unsigned bytes.

    Layout: big-endian u32 magic, one big-endian u32 per dimension (the
    magic's low byte gives the dimension count), then the payload.
    """
    if len(raw) < 4:
        raise FormatError("file shorter than the magic number", len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08X}, expected 0x{expected_magic:08X}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError("truncated dimension header", len(raw))
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    size = int(np.prod(dims)) if dims else 0
    if len(raw) < header_end + size:
        raise FormatError(f"truncated payload: need {size} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_end).reshape(dims)


def load_mnist_idx(images_path, labels_path, subsample_n: int | None, seed) -> Dataset:
    """Load an IDX image/label pair, scale pixels to [0, 1] and subsample.

    The subsample is uniform without replacement and deterministic per seed;
    ``subsample_n=None`` keeps everything in file order.
    """
    images = parse_idx(_open(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_open(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise InvalidInput("image and label counts differ")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    full = Dataset(x, y, 10)
    if subsample_n is None:
        return full
    if not 1 <= subsample_n <= len(full):
        raise InvalidInput("subsample size out of range")
    idx = np.random.default_rng(seed).choice(len(full), size=subsample_n, replace=False)
    return full.subset(idx)


def write_idx(path, array: np.ndarray, magic: int):
    """Write a uint8 array as IDX (used to build fixtures)."""
    a = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * a.ndim, *a.shape)
    Path(path).write_bytes(header + a.tobytes())
