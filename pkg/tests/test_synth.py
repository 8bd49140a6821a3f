import numpy as np
import pytest

from sparseconv.core import voxelize
from sparseconv.synth import synth_points, synth_to_file


def test_deterministic_bytes(tmp_path):
    a = tmp_path / "a.spcl"
    b = tmp_path / "b.spcl"
    synth_to_file(a, "lidar_rings", 5000, 80.0, seed=9)
    synth_to_file(b, "lidar_rings", 5000, 80.0, seed=9)
    assert a.read_bytes() == b.read_bytes()


def test_seeds_differ(tmp_path):
    a = synth_points("uniform", 100, 10.0, seed=1)
    b = synth_points("uniform", 100, 10.0, seed=2)
    assert not np.array_equal(a, b)


def test_uniform_occupancy_matches_poisson():
    extent = 100.0
    n = 100_000
    points = synth_points("uniform", n, extent, seed=5)
    t = voxelize(points, 1.0)
    lam = n / extent**3
    expected = (1.0 - np.exp(-lam)) * extent**3
    assert 0.5 * expected <= t.num_points <= 2.0 * expected


def _count_xy_modes(points, extent, bins=10, min_frac=0.02):
    """Connected components of dense cells in a coarse xy histogram."""
    hist, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins,
                                range=[[0, extent], [0, extent]])
    dense = hist > min_frac * points.shape[0]
    seen = np.zeros_like(dense)
    modes = 0
    for i in range(bins):
        for j in range(bins):
            if dense[i, j] and not seen[i, j]:
                modes += 1
                stack = [(i, j)]
                while stack:
                    x, y = stack.pop()
                    if not (0 <= x < bins and 0 <= y < bins):
                        continue
                    if seen[x, y] or not dense[x, y]:
                        continue
                    seen[x, y] = True
                    stack += [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)]
    return modes


def test_gaussian_clusters_have_four_modes():
    points = synth_points("gaussian_clusters", 20_000, 50.0, seed=3)
    assert _count_xy_modes(points, 50.0) == 4


def test_lidar_rings_concentrate_on_radii():
    extent = 100.0
    points = synth_points("lidar_rings", 20_000, extent, seed=4)
    r = np.hypot(points[:, 0] - extent / 2, points[:, 1] - extent / 2)
    ring_radii = extent * np.array([0.08, 0.14, 0.2, 0.27, 0.35, 0.44])
    nearest = np.abs(r[:, None] - ring_radii[None, :]).min(axis=1)
    assert np.quantile(nearest, 0.95) <= 0.03 * extent


def test_channels_and_bounds():
    points = synth_points("uniform", 500, 30.0, seed=0, channels=6)
    assert points.shape == (500, 9)
    assert points[:, :3].min() >= 0.0 and points[:, :3].max() < 30.0


def test_unknown_kind():
    with pytest.raises(ValueError):
        synth_points("perlin", 10, 1.0, 0)
