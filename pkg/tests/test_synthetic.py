import numpy as np
import pytest

from rimae.canonicalize import canonicalize_batch
from rimae.geometry import patch_arrays
from rimae.synthetic import FAMILIES, SyntheticShapeSpec, eigen_gap, generate_shape, make_dataset, make_specs


def test_helix_eigen_gap():
    clouds, _ = make_dataset(300, seed=0, families=("helix",))
    gaps = np.array([eigen_gap(c) for c in clouds])
    assert (gaps > 0.1).mean() >= 0.99


def test_eigen_gap_oracle(rng):
    # diag covariance 4, 1, 0.25 in expectation -> gaps 3 and 0.75 over 4
    pts = rng.normal(size=(20000, 3)) * [2, 1, 0.5]
    assert abs(eigen_gap(pts) - 0.75 / 4) < 0.02


@pytest.mark.parametrize("family", FAMILIES[:3])
def test_asymmetric_families_have_unique_frames(family):
    clouds, _ = make_dataset(10, seed=1, families=(family,))
    for c in clouds:
        pts, _, _ = patch_arrays(c, 16, 16)
        assert not canonicalize_batch(pts.reshape(-1, 16, 3))["degenerate"].any()


def test_lattice_is_degenerate():
    for variant in (0, 1):
        cloud = generate_shape(SyntheticShapeSpec("lattice-cube", variant=variant), np.random.default_rng(0))
        assert canonicalize_batch(cloud[None])["degenerate"].all()
        # 16-NN patches that cut a tie shell lose the symmetry, the others keep it
        pts, _, _ = patch_arrays(cloud, 16, 16)
        assert canonicalize_batch(pts.reshape(-1, 16, 3))["degenerate"].any()


def test_shapes_normalized():
    clouds, labels = make_dataset(8, seed=2)
    for c in clouds:
        np.testing.assert_allclose(c.mean(axis=0), 0, atol=1e-12)
        assert abs(np.linalg.norm(c, axis=1).max() - 1) < 1e-12
    assert labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]


def test_variant_labels():
    specs = make_specs(8, variants=True)
    assert [s.label for s in specs] == list(range(8))
    assert [s.variant for s in specs] == [0, 1] * 4


def test_dataset_deterministic():
    a, _ = make_dataset(5, seed=9)
    b, _ = make_dataset(5, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticShapeSpec("torus")
    with pytest.raises(ValueError):
        SyntheticShapeSpec("helix", variant=2)
