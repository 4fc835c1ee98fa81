"""Input validation helpers shared across the toolkit."""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_embedding_matrix",
    "check_image",
    "check_labels",
    "check_seed",
    "as_rng",
]


def check_embedding_matrix(x, name: str = "embeddings") -> np.ndarray:
    """Coerce to a finite 2-D float64 array with at least one row."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one row")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_image(img, name: str = "image") -> np.ndarray:
    """Coerce to an (h, w, 3) uint8 RGB array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (h, w, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    if arr.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {arr.dtype}")
    return arr


def check_labels(y, n_classes: int, name: str = "labels") -> np.ndarray:
    """Coerce to a 1-D int array with values in [0, n_classes)."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"{name} must lie in [0, {n_classes})")
    return arr


def check_seed(seed, name: str = "seed") -> int:
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ValueError(f"{name} must be an integer, got {seed!r}")
    return int(seed)


def as_rng(seed) -> np.random.Generator:
    """Build a Generator from a seed, seed sequence, or pass one through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
