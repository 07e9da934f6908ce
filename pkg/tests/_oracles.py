"""Independent reference implementations the tests compare against."""

import itertools

import mpmath
import numpy as np


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def brute_fps(points, g, seed_index=0):
    """FPS by explicit min-over-chosen loops, ties to the lowest index."""
    chosen = [seed_index]
    n = len(points)
    while len(chosen) < g:
        best, best_d = None, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(sum((points[i][a] - points[c][a]) ** 2 for a in range(3)) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def brute_knn(points, center, k):
    """k nearest indices by sorting (distance, index) tuples."""
    c = points[center]
    keyed = sorted((sum((p[a] - c[a]) ** 2 for a in range(3)), i) for i, p in enumerate(points))
    return [i for _, i in keyed[:k]]


def mp_eigh(A, dps=40):
    """High-precision symmetric eigendecomposition: descending values, column vectors."""
    with mpmath.workdps(dps):
        M = mpmath.matrix(np.asarray(A).tolist())
        vals, vecs = mpmath.eigsy(M)
        order = sorted(range(3), key=lambda i: -float(vals[i]))
        w = np.array([float(vals[i]) for i in order])
        V = np.array([[float(vecs[r, i]) for i in order] for r in range(3)])
    return w, V


def rejection_rotation_angles(n, rng):
    """Rotation angles of uniform SO(3) samples via rejection on the Haar density.

    The angle density is (1 - cos t) / pi on [0, pi]; sample t uniformly and
    accept with probability (1 - cos t) / 2.
    """
    out = []
    while len(out) < n:
        t = rng.uniform(0, np.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) < (1 - np.cos(t)) / 2
        out.extend(t[keep].tolist())
    return np.array(out[:n])


def all_permutations(n):
    return list(itertools.permutations(range(n)))


def oracle_frame(points):
    """Frame from a high-precision eigensolver plus a loop-based sign rule."""
    c = points - points.mean(axis=0)
    w, V = mp_eigh(c.T @ c / len(c))
    m3 = []
    for a in range(3):
        proj = [sum(p[r] * V[r, a] for r in range(3)) for p in c]
        m3.append(sum(v ** 3 for v in proj) / len(proj))
        if m3[a] < 0:
            V[:, a] *= -1
            m3[a] = -m3[a]
    if np.linalg.det(V) < 0:
        V[:, int(np.argmin(np.abs(m3)))] *= -1
    return V.T, c @ V
