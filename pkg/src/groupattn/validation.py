"""Input validation helpers shared by the estimators and the pipeline."""

from __future__ import annotations

import numpy as np

__all__ = [
    "ConfigurationError",
    "check_coords",
    "check_labels",
    "check_neighbor_index",
]


class ConfigurationError(ValueError):
    """Invalid configuration value or inconsistent component wiring."""


def check_coords(X, dtype=np.float32):
    """Validate a (B, N, 3) coordinate batch and return it as an ndarray."""
    arr = np.asarray(X, dtype=dtype)
    if arr.ndim == 2 and arr.shape[-1] == 3:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(
            f"expected point clouds of shape (B, N, 3), got {np.shape(X)}"
        )
    if not np.isfinite(arr).all():
        raise ValueError("point cloud coordinates contain non-finite values")
    return arr


def check_labels(y, n_samples):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(
            f"expected {n_samples} labels in a 1-D array, got shape {y.shape}"
        )
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(y)
        if not np.allclose(rounded, y):
            raise ValueError("labels must be integer class indices")
        y = rounded
    return y.astype(np.int64)


def check_neighbor_index(idx, n_points):
    """Assert the neighbor-index invariants: range, no self, no duplicates."""
    idx = np.asarray(idx)
    if idx.ndim != 3:
        raise ValueError(f"neighbor index must be (B, N, k), got {idx.shape}")
    if idx.min() < 0 or idx.max() >= n_points:
        raise ValueError("neighbor index out of range")
    b, n, k = idx.shape
    centers = np.arange(n)[None, :, None]
    if (idx == centers).any():
        raise ValueError("neighbor lists must not contain the center point")
    sorted_idx = np.sort(idx, axis=-1)
    if (sorted_idx[..., 1:] == sorted_idx[..., :-1]).any():
        raise ValueError("duplicate entries in a neighbor list")
    return idx
