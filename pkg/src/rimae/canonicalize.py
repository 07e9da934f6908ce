"""PCA canonical frames for point patches.

A patch ``p`` (K, 3) is split into content and orientation so that
``p - centroid == canonical @ R`` with ``R`` a proper rotation whose rows are
the principal axes (descending variance). Axis signs follow the sign of the
third central moment along each axis, which makes the frame equivariant:
``PCA(p @ Q)`` gives the same canonical points and ``R @ Q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateFrame
from .geometry import Patch

EIG_TIE_RTOL = 1e-9
SKEW_ATOL = 1e-9
JACOBI_TOL = 1e-14
_PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass
class CanonicalPatch:
    canonical_points: np.ndarray
    rotation: np.ndarray
    center: np.ndarray
    centroid: np.ndarray


def jacobi_eigh(A, tol=JACOBI_TOL, max_sweeps=64):
    """Cyclic Jacobi eigendecomposition of symmetric 3x3 matrices.

    Accepts (3, 3) or (n, 3, 3). Eigenvalues come back in descending order
    with eigenvectors as the matching columns. Sweeps stop once the
    off-diagonal Frobenius norm drops below ``tol`` times the matrix norm.
    """
    A = np.array(A, dtype=np.float64)
    single = A.ndim == 2
    A = A.reshape(-1, 3, 3)
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    n = A.shape[0]
    V = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    scale = np.sqrt((A * A).sum(axis=(1, 2)))
    limit = tol * np.where(scale > 0, scale, 1.0)
    for _ in range(max_sweeps):
        off = np.sqrt(A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2) * np.sqrt(2.0)
        if np.all(off <= limit):
            break
        for p, q in _PAIRS:
            apq = A[:, p, q]
            active = apq != 0.0
            safe = np.where(active, apq, 1.0)
            with np.errstate(over="ignore", divide="ignore"):
                # huge theta means a negligible coupling: t -> 0
                theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            J = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            J[:, p, p] = c
            J[:, q, q] = c
            J[:, p, q] = s
            J[:, q, p] = -s
            A = np.swapaxes(J, 1, 2) @ A @ J
            V = V @ J
    evals = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    if single:
        return evals[0], V[0]
    return evals, V


def canonicalize_batch(points):
    """Canonicalize many patches at once without raising.

    Parameters
    ----------
    points : array (n, K, 3)

    Returns
    -------
    dict with ``canonical`` (n, K, 3), ``rotation`` (n, 3, 3), ``centroid``
    (n, 3), ``eigenvalues`` (n, 3), ``skewness`` (n, 3), ``degenerate`` (n,)
    bool and ``reason`` (n,) str ("" when the frame is unique).
    """
    pts = np.asarray(points, dtype=np.float64)
    n, k, _ = pts.shape
    centroid = pts.mean(axis=1)
    pc = pts - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", pc, pc) / k
    evals, axes = jacobi_eigh(cov)

    proj = pc @ axes
    m3 = (proj ** 3).mean(axis=1)
    sign = np.where(m3 < 0, -1.0, 1.0)
    axes = axes * sign[:, None, :]
    m3 = m3 * sign

    flip = np.linalg.det(axes) < 0
    weakest = np.argmin(np.abs(m3), axis=1)
    rows = np.nonzero(flip)[0]
    axes[rows, :, weakest[rows]] *= -1.0
    m3[rows, weakest[rows]] *= -1.0

    total = np.trace(cov, axis1=1, axis2=2)
    denom = np.where(total > 0, total, 1.0) ** 1.5
    skew = m3 / denom[:, None]

    top = np.maximum(np.abs(evals), 1e-300)
    gaps = np.abs(evals[:, :-1] - evals[:, 1:])
    tie = np.any(gaps <= EIG_TIE_RTOL * top[:, :-1], axis=1) | (total <= 0)
    flat = np.any(np.abs(skew) < SKEW_ATOL, axis=1)
    reason = np.where(tie, "spectrum", np.where(flat, "skewness", ""))

    rotation = np.swapaxes(axes, 1, 2)
    canonical = pc @ axes
    return {
        "canonical": canonical,
        "rotation": rotation,
        "centroid": centroid,
        "eigenvalues": evals,
        "skewness": skew,
        "degenerate": tie | flat,
        "reason": reason,
    }


def pca_canonicalize(patch):
    """Canonical points and frame of one patch; raises :class:`DegenerateFrame`."""
    if isinstance(patch, Patch):
        pts, center = patch.points, patch.center
    else:
        pts = np.asarray(patch, dtype=np.float64)
        center = pts.mean(axis=0)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"patch points must be (K, 3), got {pts.shape}")
    if pts.shape[0] < 3:
        raise ValueError("PCA canonicalization needs at least 3 points")
    out = canonicalize_batch(pts[None])
    if out["degenerate"][0]:
        why = out["reason"][0]
        raise DegenerateFrame(
            f"patch frame is ambiguous ({why})",
            eigenvalues=out["eigenvalues"][0],
            skewness=out["skewness"][0],
            reason=str(why),
        )
    return CanonicalPatch(
        canonical_points=out["canonical"][0],
        rotation=out["rotation"][0],
        center=np.asarray(center, dtype=np.float64).copy(),
        centroid=out["centroid"][0],
    )


def equivariance_check(patch, R):
    """Residuals of canonical points and frame after rotating ``patch`` by ``R``."""
    base = pca_canonicalize(patch)
    if isinstance(patch, Patch):
        moved = Patch(points=patch.points @ R, center=patch.center @ R, indices=patch.indices)
    else:
        moved = np.asarray(patch) @ R
    turned = pca_canonicalize(moved)
    return {
        "points_residual": float(np.abs(turned.canonical_points - base.canonical_points).max()),
        "rotation_residual": float(np.linalg.norm(turned.rotation - base.rotation @ R)),
    }


def relative_rotation(Ri, Rj):
    """Relative orientation ``Rj @ Ri.T``; unchanged when both are right-multiplied by R."""
    return np.asarray(Rj) @ np.asarray(Ri).T


def relative_rotations(rotations, degenerate=None):
    """All pairwise relative rotations.

    ``rotations`` (..., G, 3, 3) -> (..., G, G, 3, 3) with ``[i, j] = R_j R_i^T``.
    Pairs touching a degenerate patch are set to the identity.
    """
    R = np.asarray(rotations, dtype=np.float64)
    rel = np.einsum("...jkl,...iml->...ijkm", R, R)
    if degenerate is not None:
        deg = np.asarray(degenerate, dtype=bool)
        pair = deg[..., :, None] | deg[..., None, :]
        rel = np.where(pair[..., None, None], np.eye(3), rel)
    return rel
