"""Synthetic shape families standing in for real scans at desk scale.

Three families are skew-asymmetric so their patches have unique PCA frames;
``lattice-cube`` is a noiseless grid whose symmetric patches exercise the
degenerate-frame path on purpose. Every shape is generated upright (the
long/helix axis along z where it has one) and normalized to unit max-norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import normalize_cloud

FAMILIES = ("helix", "asymmetric-L", "skewed-ellipsoid", "lattice-cube")


@dataclass(frozen=True)
class SyntheticShapeSpec:
    family: str
    points: int = 256
    noise: float = 0.01
    label: int = 0
    variant: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.points < 1:
            raise ValueError("points must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.variant not in (0, 1):
            raise ValueError("variant must be 0 or 1")


def _helix(n, variant, rng):
    turns = rng.uniform(2.2, 2.8) if variant == 0 else rng.uniform(1.2, 1.6)
    a = rng.uniform(0.9, 1.1)
    b = rng.uniform(0.45, 0.55)
    h = rng.uniform(3.5, 4.5)
    t = rng.uniform(0.0, 2.0 * np.pi * turns, size=n)
    return np.stack([a * np.cos(t), b * np.sin(t), h * (t / t.max() - 0.5)], axis=1)


def _asym_l(n, variant, rng):
    long_arm = rng.uniform(1.6, 2.0)
    short_arm = rng.uniform(0.7, 1.0) if variant == 0 else rng.uniform(0.3, 0.45)
    w, th = 0.25, 0.15
    vol_a, vol_b = long_arm * w, (short_arm - w) * w
    na = int(round(n * vol_a / (vol_a + vol_b)))
    arm_a = rng.uniform([0, 0, 0], [long_arm, w, th], size=(na, 3))
    arm_b = rng.uniform([0, w, 0], [w, short_arm, th], size=(n - na, 3))
    return np.concatenate([arm_a, arm_b])


def _skewed_ellipsoid(n, variant, rng):
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    axes = np.array([rng.uniform(0.9, 1.1), rng.uniform(0.55, 0.65), rng.uniform(0.3, 0.4)])
    p = u * axes
    bend = 0.35 if variant == 0 else -0.35
    p[:, 0] += 0.3 * p[:, 0] ** 2 / axes[0]
    p[:, 2] += bend * p[:, 0] ** 2
    return p


def _lattice_cube(n, variant=0):
    side = max(3, int(round(n ** (1.0 / 3.0))))
    g = np.linspace(-1.0, 1.0, side)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    if variant == 1:
        # a box instead of a cube: still mirror-symmetric, so still degenerate
        pts = pts * np.array([1.0, 0.75, 0.5])
    return pts


def generate_shape(spec, rng):
    """Points (N, 3) for ``spec``; the lattice ignores noise and has side**3 points."""
    if spec.family == "lattice-cube":
        return normalize_cloud(_lattice_cube(spec.points, spec.variant))
    if spec.family == "helix":
        pts = _helix(spec.points, spec.variant, rng)
    elif spec.family == "asymmetric-L":
        pts = _asym_l(spec.points, spec.variant, rng)
    else:
        pts = _skewed_ellipsoid(spec.points, spec.variant, rng)
    if spec.noise > 0:
        pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
    return normalize_cloud(pts)


def make_specs(count, families=FAMILIES, points=256, noise=0.01, variants=False):
    """Round-robin specs; labels are family indices (x2 + variant with ``variants``)."""
    specs = []
    per = 2 if variants else 1
    for i in range(count):
        fam_i = (i // per) % len(families) if variants else i % len(families)
        variant = i % 2 if variants else 0
        label = fam_i * per + variant
        specs.append(SyntheticShapeSpec(families[fam_i], points, noise, label, variant))
    return specs


def make_dataset(count, seed=0, families=FAMILIES, points=256, noise=0.01, variants=False):
    """Clouds and labels; sample ``i`` draws from its own seeded stream."""
    specs = make_specs(count, families, points, noise, variants)
    clouds = [generate_shape(s, np.random.default_rng([seed, i])) for i, s in enumerate(specs)]
    return clouds, np.array([s.label for s in specs], dtype=np.int64)


def eigen_gap(points):
    """Smallest gap between consecutive covariance eigenvalues over the largest one."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    ev = np.sort(np.linalg.eigvalsh(pts.T @ pts / len(pts)))[::-1]
    return float(np.min(ev[:-1] - ev[1:]) / ev[0])
