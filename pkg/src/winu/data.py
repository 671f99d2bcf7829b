"""Datasets: synthetic ridge problems, MNIST IDX files, standardization, splits."""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import BadMagic, ClassAbsent, ConfigError, CountMismatch, DataError, TruncatedFile

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_EPS = 1e-8
DATA_DIR_ENV = "WINU_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise CountMismatch(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} feature rows"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.split_tag)


@dataclass(frozen=True)
class ForgetSplit:
    forget_indices: np.ndarray
    n: int

    def __post_init__(self):
        idx = np.asarray(self.forget_indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ConfigError("forget indices must be 1-D")
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.n):
            raise ConfigError("forget indices must be sorted, unique and inside [0, n)")
        if idx.size >= self.n:
            raise ConfigError("forget set must be strictly smaller than the dataset")
        object.__setattr__(self, "forget_indices", idx)

    @classmethod
    def from_indices(cls, indices, n: int) -> "ForgetSplit":
        return cls(np.unique(np.asarray(indices, dtype=np.int64)), n)

    @property
    def m(self) -> int:
        return int(self.forget_indices.size)

    @property
    def retain_indices(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.forget_indices] = False
        return np.flatnonzero(mask)

    def forget(self, data: Dataset) -> Dataset:
        return data.subset(self.forget_indices)

    def retain(self, data: Dataset) -> Dataset:
        return data.subset(self.retain_indices)


class SyntheticRidge(NamedTuple):
    train: Dataset
    test: Dataset
    split: ForgetSplit
    true_theta: np.ndarray


def generate_synthetic_ridge(
    n: int = 2000,
    d: int = 50,
    forget_fraction: float = 0.01,
    noise_var: float = 0.01,
    shift_factor: float = 1.0,
    seed: int = 0,
    n_test: int = 500,
) -> SyntheticRidge:
    """Linear-Gaussian regression data with an optionally shifted forget set.

    Retain and test features are ``N(0, I)``; forget features are
    ``N(0, shift_factor * I)``. Targets are ``x @ theta_true + eps`` with
    ``theta_true ~ N(0, I)`` and ``eps ~ N(0, noise_var)``.
    """
    if not 0 < forget_fraction < 1:
        raise ConfigError("forget_fraction must lie in (0, 1)")
    if shift_factor < 1:
        raise ConfigError("shift_factor must be >= 1")
    if noise_var < 0 or n < 2 or d < 1 or n_test < 1:
        raise ConfigError("invalid synthetic ridge configuration")
    m = int(round(forget_fraction * n))
    if not 0 < m < n:
        raise ConfigError(f"forget fraction {forget_fraction} gives m={m} for n={n}")
    rng = np.random.Generator(np.random.Philox(seed))
    true_theta = rng.standard_normal(d)
    forget_idx = np.sort(rng.choice(n, size=m, replace=False))
    x = rng.standard_normal((n, d))
    x[forget_idx] *= np.sqrt(shift_factor)
    y = x @ true_theta + np.sqrt(noise_var) * rng.standard_normal(n)
    x_test = rng.standard_normal((n_test, d))
    y_test = x_test @ true_theta + np.sqrt(noise_var) * rng.standard_normal(n_test)
    return SyntheticRidge(
        Dataset(x, y, "train"),
        Dataset(x_test, y_test, "test"),
        ForgetSplit(forget_idx, n),
        true_theta,
    )


# ---------------------------------------------------------------------------
# MNIST


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def _parse_idx(buf: bytes, magic: int, ndims: int, path) -> tuple[tuple[int, ...], bytes]:
    header = 4 + 4 * ndims
    if len(buf) < 4:
        raise TruncatedFile(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(buf) < header:
        raise TruncatedFile(f"{path}: truncated header")
    dims = struct.unpack(f">{ndims}I", buf[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    body = buf[header:]
    if len(body) < size:
        raise TruncatedFile(f"{path}: expected {size} payload bytes, found {len(body)}")
    return dims, body[:size]


def load_mnist_idx(images_path, labels_path, split_tag: str = "train") -> Dataset:
    """Read an IDX image/label pair into a Dataset (raw pixel values as float64).

    Raises:
        BadMagic, TruncatedFile, CountMismatch
    """
    (count, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if count != n_labels:
        raise CountMismatch(f"{count} images but {n_labels} labels")
    x = np.frombuffer(pixels, dtype=np.uint8).reshape(count, rows * cols).astype(np.float64)
    y = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, split_tag)


def mnist_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise DataError(f"MNIST location unknown: set {DATA_DIR_ENV} or pass data_dir")
    return Path(data_dir)


def load_mnist(split: str = "train", data_dir=None) -> Dataset:
    base = mnist_dir(data_dir)
    images, labels = MNIST_FILES[split]
    paths = []
    for name in (images, labels):
        p = base / name
        if not p.exists() and (base / (name + ".gz")).exists():
            p = base / (name + ".gz")
        paths.append(p)
    return load_mnist_idx(paths[0], paths[1], split)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.std < STD_EPS

    def apply(self, data: Dataset) -> Dataset:
        safe = np.where(self.degenerate, 1.0, self.std)
        x = (data.features - self.mean) / safe
        x[:, self.degenerate] = 0.0
        return Dataset(x, data.labels, data.split_tag)


def fit_standardizer(train: Dataset) -> Standardizer:
    """Per-feature mean and population std; features with std < 1e-8 map to 0."""
    return Standardizer(train.features.mean(axis=0), train.features.std(axis=0))


def class_forget_split(data: Dataset, class_id: int) -> ForgetSplit:
    idx = np.flatnonzero(data.labels == class_id)
    if idx.size == 0:
        raise ClassAbsent(f"no samples of class {class_id}")
    return ForgetSplit(idx, data.n)


def subsample(data: Dataset, size: int, seed: int) -> Dataset:
    """Uniform random subset of ``size`` rows, kept in original order."""
    if size >= data.n:
        return data
    rng = np.random.Generator(np.random.Philox(seed))
    return data.subset(np.sort(rng.choice(data.n, size=size, replace=False)))


def export_csv(data: Dataset, path) -> Path:
    """Write features and labels as CSV with 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k}" for k in range(data.dim)] + ["y"])
        for row, label in zip(data.features, data.labels):
            w.writerow([format(v, ".17g") for v in row] + [format(label, ".17g")])
    return path
