"""Point clouds, FPS/KNN patching and rotations.

Row-vector convention throughout: a cloud ``X`` (N, 3) is rotated as ``X @ R``.
Ties in FPS and KNN are always broken towards the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ROT_TOL = 1e-8


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


@dataclass
class Patch:
    points: np.ndarray
    center: np.ndarray
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))


def _points(cloud):
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def normalize_cloud(points):
    """Center on the centroid and scale to unit max-norm."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    scale = np.sqrt((pts * pts).sum(axis=1)).max()
    return pts / scale if scale > 0 else pts


def _sqdist(points, center):
    diff = points - center
    return (diff * diff).sum(axis=-1)


def fps(cloud, g, seed_index=0):
    """Farthest point sampling starting from ``seed_index``."""
    pts = _points(cloud)
    n = pts.shape[0]
    if not 1 <= g <= n:
        raise ValueError(f"fps needs 1 <= g <= N, got g={g}, N={n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for N={n}")
    chosen = np.empty(g, dtype=np.intp)
    chosen[0] = seed_index
    mind = _sqdist(pts, pts[seed_index])
    mind[seed_index] = -np.inf
    for s in range(1, g):
        nxt = int(np.argmax(mind))
        chosen[s] = nxt
        mind = np.minimum(mind, _sqdist(pts, pts[nxt]))
        mind[chosen[: s + 1]] = -np.inf
    return chosen


def knn_indices(cloud, center_index, k):
    pts = _points(cloud)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"knn needs 1 <= k <= N, got k={k}, N={n}")
    d = _sqdist(pts, pts[center_index])
    return np.argsort(d, kind="stable")[:k]


def knn_patch(cloud, center_index, k):
    pts = _points(cloud)
    idx = knn_indices(pts, center_index, k)
    return Patch(points=pts[idx].copy(), center=pts[center_index].copy(), indices=idx)


def patch_arrays(cloud, g, k, seed_index=0):
    """Vectorized patching.

    Returns
    -------
    points : (G, K, 3) absolute patch coordinates
    centers : (G, 3)
    indices : (G, K) source indices, nearest first
    """
    pts = _points(cloud)
    if k > pts.shape[0]:
        raise ValueError(f"knn needs k <= N, got k={k}, N={pts.shape[0]}")
    centers_idx = fps(pts, g, seed_index)
    centers = pts[centers_idx]
    d = _sqdist(pts[None, :, :], centers[:, None, :])
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return pts[idx], centers, idx


def make_patches(cloud, g=64, k=32, seed_index=0):
    pts, centers, idx = patch_arrays(cloud, g, k, seed_index)
    return [Patch(points=pts[i], center=centers[i], indices=idx[i]) for i in range(g)]


# ------------------------------------------------------------------ rotations

def quaternion_to_matrix(q):
    """Unit quaternion (w, x, y, z) to a row-convention rotation matrix."""
    w, x, y, z = q
    col = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return col.T


def random_rotation(rng):
    """Uniform sample from SO(3) via a normalized 4-d Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return quaternion_to_matrix(q)


def rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def random_z_rotation(rng):
    return rotation_z(rng.uniform(0.0, 2.0 * np.pi))


def is_rotation(R, tol=_ROT_TOL):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (np.abs(R.T @ R - np.eye(3)).max() <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def apply_rotation(cloud, R):
    if not is_rotation(R):
        raise ValueError("R is not a proper rotation matrix")
    if isinstance(cloud, PointCloud):
        return PointCloud(cloud.points @ R, cloud.label)
    return _points(cloud) @ R


def scenario_rotation(kind, rng):
    """Rotation for a scenario leg: ``"none"``, ``"z"`` or ``"so3"``."""
    if kind == "none":
        return np.eye(3)
    if kind == "z":
        return random_z_rotation(rng)
    if kind == "so3":
        return random_rotation(rng)
    raise ValueError(f"unknown rotation kind {kind!r}")
