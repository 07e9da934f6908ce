"""Patch geometry and the three encoder inputs.

Geometry (FPS/KNN patches, PCA frames, degeneracy fallback) is parameter-free
and computed once per batch as numpy arrays; :func:`embed_patches` then turns
it into differentiable content tokens and position embeddings for a given
parameter set. Relative-orientation embeddings are built by the encoder from
the rotations carried here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .canonicalize import canonicalize_batch, relative_rotations
from .geometry import patch_arrays
from .nn import init_mlp, mlp
from .tensor import Tensor

JITTER_SIGMA = 1e-4


@dataclass
class PatchGeometry:
    """Batched patch decomposition (B clouds, G patches of K points)."""

    points: np.ndarray      # (B, G, K, 3) absolute
    centers: np.ndarray     # (B, G, 3)
    canonical: np.ndarray   # (B, G, K, 3)
    rotations: np.ndarray   # (B, G, 3, 3)
    degenerate: np.ndarray  # (B, G) frame replaced by identity
    jittered: np.ndarray    # (B, G) frame recovered only after jitter

    @property
    def local(self):
        """Patch points relative to their FPS center."""
        return self.points - self.centers[:, :, None, :]

    @property
    def ambiguous(self):
        """Patches whose frame is not guaranteed to be rotation-equivariant."""
        return self.degenerate | self.jittered

    @property
    def shape(self):
        return self.points.shape[:2]

    def select(self, rows):
        return PatchGeometry(*(a[rows] for a in (
            self.points, self.centers, self.canonical, self.rotations, self.degenerate, self.jittered)))


def patch_geometry(clouds, g, k, seed_index=0, rng=None):
    """Patch and canonicalize a batch of clouds.

    ``clouds`` is a sequence of (N_b, 3) arrays (N may differ per cloud).
    Degenerate frames are retried once on a copy jittered with
    sigma=1e-4; if that also fails the patch keeps its raw centered points,
    gets the identity rotation and is flagged in ``degenerate``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    pts, ctr = [], []
    for cloud in clouds:
        p, c, _ = patch_arrays(np.asarray(cloud, dtype=np.float64), g, k, seed_index)
        pts.append(p)
        ctr.append(c)
    points = np.stack(pts)
    centers = np.stack(ctr)
    b = points.shape[0]
    flat = points.reshape(b * g, k, 3)
    out = canonicalize_batch(flat)
    canonical = out["canonical"]
    rotation = out["rotation"]
    bad = out["degenerate"].copy()
    jittered = np.zeros_like(bad)
    if bad.any():
        rows = np.nonzero(bad)[0]
        noisy = flat[rows] + rng.normal(0.0, JITTER_SIGMA, size=flat[rows].shape)
        retry = canonicalize_batch(noisy)
        ok = ~retry["degenerate"]
        fixed = rows[ok]
        centered = flat[fixed] - flat[fixed].mean(axis=1, keepdims=True)
        rotation[fixed] = retry["rotation"][ok]
        canonical[fixed] = centered @ np.swapaxes(retry["rotation"][ok], 1, 2)
        jittered[fixed] = True
        bad[fixed] = False
        still = rows[~ok]
        rotation[still] = np.eye(3)
        canonical[still] = flat[still] - flat[still].mean(axis=1, keepdims=True)
    return PatchGeometry(
        points=points,
        centers=centers,
        canonical=canonical.reshape(b, g, k, 3),
        rotations=rotation.reshape(b, g, 3, 3),
        degenerate=bad.reshape(b, g),
        jittered=jittered.reshape(b, g),
    )


@dataclass
class PatchTokens:
    tokens: Tensor            # (B, G, D) content tokens
    ripos: Tensor | None      # (B, G, D) position embeddings, None when disabled
    rotations: np.ndarray     # (B, G, 3, 3)
    centers: np.ndarray       # (B, G, 3)
    degenerate_mask: np.ndarray  # (B, G) ambiguous frames; their pairs get R_ij = I

    def subset(self, index):
        """Per-sample patch subset, ``index`` integer (B, V)."""
        rows = np.arange(index.shape[0])[:, None]
        return PatchTokens(
            tokens=T.gather(self.tokens, index),
            ripos=None if self.ripos is None else T.gather(self.ripos, index),
            rotations=self.rotations[rows, index],
            centers=self.centers[rows, index],
            degenerate_mask=self.degenerate_mask[rows, index],
        )


def init_embed_params(params, dim, rng, ori_embedding=False):
    init_mlp(params, "tok", (3, 64, 128), rng)
    init_mlp(params, "tok_head", (128, dim), rng)
    init_mlp(params, "oe", (9, dim, dim), rng)
    init_mlp(params, "pe", (3, dim, dim), rng)
    if ori_embedding:
        init_mlp(params, "ori", (9, dim, dim), rng)
    return params


def tokenize_content(points, params):
    """Mini-PointNet: per-point MLP 3->64->128, max over points, then 128->D.

    ``points`` (..., K, 3) -> (..., D).
    """
    h = mlp(points, params, "tok", 2, act=T.relu)
    return mlp(T.amax(h, axis=-2), params, "tok_head", 1)


def embed_relative_orientation(rel, params, name="oe"):
    """MLP over row-major flattened rotations: (..., 3, 3) -> (..., D)."""
    rel = rel if isinstance(rel, Tensor) else Tensor(rel)
    flat = T.reshape(rel, rel.shape[:-2] + (9,))
    return mlp(flat, params, name, 2)


def position_feature(centers, rotations):
    """``c_i R_i^T``: where the cloud origin sits in the patch frame."""
    return np.einsum("...k,...jk->...j", centers, rotations)


def embed_position(feature, params):
    feature = feature if isinstance(feature, Tensor) else Tensor(feature)
    return mlp(feature, params, "pe", 2)


def embed_patches(geom, params, ablation):
    """Content tokens and position embeddings for one parameter set.

    In baseline mode the tokenizer sees raw center-relative points and the
    position MLP sees raw center coordinates, which is not rotation-invariant.
    """
    content = geom.local if ablation.baseline else geom.canonical
    tokens = tokenize_content(Tensor(content), params)
    if ablation.ori_embedding:
        tokens = T.add(tokens, embed_relative_orientation(geom.rotations, params, "ori"))
    if ablation.baseline:
        ripos = embed_position(geom.centers, params)
    elif ablation.ri_pe:
        ripos = embed_position(position_feature(geom.centers, geom.rotations), params)
    else:
        ripos = None
    return PatchTokens(
        tokens=tokens,
        ripos=ripos,
        rotations=geom.rotations,
        centers=geom.centers,
        degenerate_mask=geom.ambiguous,
    )


def relative_orientation_embedding(rotations, degenerate, params, name="oe"):
    """Embeddings of all pairwise relative rotations, (B, G, G, D)."""
    return embed_relative_orientation(relative_rotations(rotations, degenerate), params, name)


def build_patch_tokens(clouds, g, k, params, ablation, seed_index=0, rng=None):
    """Cloud(s) -> :class:`PatchTokens` in one call."""
    if isinstance(clouds, np.ndarray) and clouds.ndim == 2:
        clouds = [clouds]
    geom = patch_geometry(clouds, g, k, seed_index, rng)
    return embed_patches(geom, params, ablation)
