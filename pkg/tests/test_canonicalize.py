import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from rimae.canonicalize import (
    canonicalize_batch,
    equivariance_check,
    jacobi_eigh,
    pca_canonicalize,
    relative_rotation,
    relative_rotations,
)
from rimae.exceptions import DegenerateFrame
from rimae.geometry import Patch, random_rotation, rotation_z

from _oracles import mp_eigh, oracle_frame

FIVE = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3], [2, 1, 1]], dtype=float)


def test_symmetric_patch_is_degenerate():
    pts = np.array([[2, 0, 0], [-2, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
    with pytest.raises(DegenerateFrame) as err:
        pca_canonicalize(pts)
    np.testing.assert_allclose(err.value.eigenvalues, [2.0, 0.5, 0.0], atol=1e-12)


def test_five_point_example_against_oracle():
    cp = pca_canonicalize(FIVE)
    R, canon = oracle_frame(FIVE)
    np.testing.assert_allclose(cp.rotation, R, atol=1e-9)
    np.testing.assert_allclose(cp.canonical_points, canon, atol=1e-9)
    np.testing.assert_allclose(cp.canonical_points @ cp.rotation + cp.centroid, FIVE, atol=1e-10)


def test_canonical_covariance_is_sorted_diagonal():
    cp = pca_canonicalize(FIVE)
    cov = cp.canonical_points.T @ cp.canonical_points / len(FIVE)
    np.testing.assert_allclose(cov - np.diag(np.diag(cov)), 0, atol=1e-10)
    assert np.all(np.diff(np.diag(cov)) <= 1e-10)
    assert abs(np.linalg.det(cp.rotation) - 1) < 1e-12


def test_already_canonical_patch_is_fixed_point(rng):
    for _ in range(100):
        canon = pca_canonicalize(rng.exponential(size=(20, 3)) * [3, 2, 1]).canonical_points
        if np.all((canon ** 3).mean(axis=0) > 0):
            break
    again = pca_canonicalize(canon)
    np.testing.assert_allclose(again.rotation, np.eye(3), atol=1e-10)


def test_too_few_points():
    with pytest.raises(ValueError):
        pca_canonicalize(np.eye(3)[:2])


def test_equivariance_identity_is_exact():
    rep = equivariance_check(FIVE, np.eye(3))
    assert rep["points_residual"] < 1e-14 and rep["rotation_residual"] < 1e-14


def test_equivariance_hundred_rotations(rng):
    patch = Patch(points=FIVE, center=FIVE[0])
    for _ in range(100):
        rep = equivariance_check(patch, random_rotation(rng))
        assert rep["points_residual"] < 1e-9 and rep["rotation_residual"] < 1e-9


def test_equivariance_symmetric_raises():
    with pytest.raises(DegenerateFrame):
        equivariance_check(np.array([[1, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0.0]]), np.eye(3))


@given(st.integers(0, 2**32 - 1), st.integers(4, 40))
def test_equivariance_property(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.gamma(2.0, size=(k, 3)) * rng.uniform(0.5, 2.0, size=3)
    out = canonicalize_batch(pts[None])
    assume(not out["degenerate"][0])
    # well-conditioned frames only: tiny gaps or skews amplify rounding legitimately
    gaps = np.diff(out["eigenvalues"][0])
    assume(np.abs(gaps).min() > 1e-3 * out["eigenvalues"][0, 0])
    assume(np.abs(out["skewness"][0]).min() > 1e-3)
    rep = equivariance_check(pts, random_rotation(rng))
    assert rep["points_residual"] < 1e-9 and rep["rotation_residual"] < 1e-9


def test_jacobi_matches_oracle(rng):
    for _ in range(50):
        A = rng.normal(size=(3, 3))
        A = A + A.T
        w, V = jacobi_eigh(A)
        wo, _ = mp_eigh(A)
        np.testing.assert_allclose(w, wo, atol=1e-12)
        np.testing.assert_allclose(A @ V, V * w, atol=1e-12)
        np.testing.assert_allclose(V.T @ V, np.eye(3), atol=1e-12)


def test_jacobi_batch_and_diagonal():
    w, V = jacobi_eigh(np.stack([np.diag([1.0, 3.0, 2.0]), np.zeros((3, 3))]))
    np.testing.assert_array_equal(w[0], [3, 2, 1])
    np.testing.assert_array_equal(w[1], [0, 0, 0])


# ------------------------------------------------------- relative rotations

def test_relative_rotation_same_is_identity(rng):
    R = random_rotation(rng)
    np.testing.assert_allclose(relative_rotation(R, R), np.eye(3), atol=1e-12)


def test_relative_rotation_z_example():
    out = relative_rotation(rotation_z(np.radians(30)), rotation_z(np.radians(90)))
    np.testing.assert_allclose(out, rotation_z(np.radians(60)), atol=1e-12)


def test_relative_rotation_invariance(rng):
    Ri, Rj = random_rotation(rng), random_rotation(rng)
    ref = relative_rotation(Ri, Rj)
    for _ in range(100):
        R = random_rotation(rng)
        np.testing.assert_allclose(relative_rotation(Ri @ R, Rj @ R), ref, atol=1e-12)


def test_relative_rotations_batch(rng):
    Rs = np.stack([random_rotation(rng) for _ in range(4)])
    rel = relative_rotations(Rs)
    for i in range(4):
        for j in range(4):
            np.testing.assert_allclose(rel[i, j], Rs[j] @ Rs[i].T, atol=1e-14)
    deg = np.array([False, True, False, False])
    rel = relative_rotations(Rs, deg)
    np.testing.assert_array_equal(rel[1, 2], np.eye(3))
    np.testing.assert_array_equal(rel[3, 1], np.eye(3))
    np.testing.assert_allclose(rel[0, 2], Rs[2] @ Rs[0].T)
