"""Labelled datasets and the bundled synthetic fixtures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # float64 [n, ...]
    labels: np.ndarray  # int64 [n]
    split: str = "train"
    class_count: Optional[int] = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if f.ndim < 2:
            f = f.reshape(len(f), -1)
        if len(f) != len(y):
            raise ValueError(f"{len(f)} feature rows but {len(y)} labels")
        if y.size and (y.min() < 0 or np.any(y != np.round(y))):
            raise ValueError("labels must be nonnegative integers")
        y = y.astype(np.int64)
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        cc = self.class_count
        if cc is None:
            cc = int(y.max()) + 1 if y.size else 0
        elif y.size and y.max() >= cc:
            raise ValueError(f"label {int(y.max())} >= class_count {cc}")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", int(cc))

    def __len__(self):
        return len(self.labels)

    @property
    def feature_shape(self):
        return self.features.shape[1:]


def make_blobs(centers, n_per_class: int, std: float, seed: int, split: str = "train") -> Dataset:
    """Isotropic Gaussian blobs, interleaved by class, deterministic in ``seed``."""
    centers = np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k, d = centers.shape
    pts = centers[None, :, :] + std * rng.standard_normal((n_per_class, k, d))
    labels = np.tile(np.arange(k), n_per_class)
    return Dataset(pts.reshape(-1, d), labels, split, k)


BLOBS2D_CENTERS = [(-2.0, -2.0), (2.0, -2.0), (-2.0, 2.0), (2.0, 2.0)]


def blobs2d(split: str = "train", seed: int = 42, n_per_class: int = 100) -> Dataset:
    """Bundled 4-class 2-D blobs; train and test draw from disjoint streams."""
    offset = 0 if split == "train" else 1
    return make_blobs(BLOBS2D_CENTERS, n_per_class, 1.0, seed * 2 + offset, split)


def blobs16d(split: str = "train", seed: int = 42, n_per_class: int = 100) -> Dataset:
    """Bundled 4-class 16-D blobs with seeded random centers."""
    centers = 1.5 * np.random.default_rng(7).standard_normal((4, 16))
    offset = 0 if split == "train" else 1
    return make_blobs(centers, n_per_class, 1.0, seed * 2 + offset, split)


def separable_blobs(seed: int = 0, n_per_class: int = 50) -> Dataset:
    """Two well separated 2-D classes."""
    return make_blobs([(-3.0, 0.0), (3.0, 0.0)], n_per_class, 0.5, seed)
