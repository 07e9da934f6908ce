"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError


def check_point_cloud(points, min_points=1, name="cloud"):
    """Return ``points`` as a finite float64 (N, 3) array or raise."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise ValueError(f"{name} has {arr.shape[0]} points, need at least {min_points}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or inf")
    return arr


def check_point_clouds(clouds, min_points=1):
    """Accept a sequence of (N_i, 3) clouds or one (n, N, 3) array; return a list."""
    if isinstance(clouds, np.ndarray):
        if clouds.ndim != 3:
            raise DimensionError(f"expected an (n, N, 3) array, got {clouds.shape}")
        clouds = list(clouds)
    else:
        clouds = list(clouds)
    if not clouds:
        raise ValueError("no point clouds given")
    return [check_point_cloud(c, min_points, f"cloud[{i}]") for i, c in enumerate(clouds)]


def check_labels(labels, n):
    y = np.asarray(labels)
    if y.ndim != 1 or len(y) != n:
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    return y
