import numpy as np
import pytest

from sparseconv.oracle import (
    ComparisonReport,
    compare,
    dense_conv_reference,
    dense_grid,
    dense_transposed_conv_reference,
    downsample_coords_reference,
    map_search_bruteforce,
)

from conftest import random_tensor


def test_single_point_pointwise():
    grid = np.zeros((1, 3, 3, 3, 2), dtype=np.float32)
    grid[0, 1, 1, 1] = [1.0, 2.0]
    w = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    active = np.array([[0, 1, 1, 1]])
    out = dense_conv_reference(grid, w, 1, 1, active, (3, 3, 3))
    np.testing.assert_allclose(out[0, 1, 1, 1], grid[0, 1, 1, 1] @ w[0])
    assert np.count_nonzero(out) == 3


def test_two_adjacent_points_one_hot():
    # two active sites, one-hot weights pick a single neighbor contribution:
    # with W nonzero only at offset (0,0,1), out[q] = x[q + (0,0,1)]
    grid = np.zeros((1, 4, 4, 4, 1), dtype=np.float32)
    grid[0, 1, 1, 1] = 3.0
    grid[0, 1, 1, 2] = 5.0
    w = np.zeros((27, 1, 1), dtype=np.float32)
    w[14, 0, 0] = 1.0  # offset index 14 of the 3x3x3 kernel is (0, 0, 1)
    active = np.array([[0, 1, 1, 1], [0, 1, 1, 2]])
    out = dense_conv_reference(grid, w, 3, 1, active, (4, 4, 4))
    assert out[0, 1, 1, 1, 0] == 5.0   # sees its +z neighbor
    assert out[0, 1, 1, 2, 0] == 0.0   # +z neighbor of (1,1,2) is inactive


def test_transposed_reference_unit_stride2():
    # one down-level point scatters to its full 2x2x2 upsample window
    grid = np.zeros((1, 2, 2, 2, 1), dtype=np.float32)
    grid[0, 0, 0, 0] = 2.0
    w = np.ones((8, 1, 1), dtype=np.float32)
    active = np.array([[0, x, y, z] for x in range(2) for y in range(2) for z in range(2)])
    out = dense_transposed_conv_reference(grid, w, 2, 2, active, (4, 4, 4))
    np.testing.assert_allclose(out[0, :2, :2, :2, 0], 2.0)
    assert out[0, 2:, :, :, 0].max() == 0.0


def test_bruteforce_empty():
    off = np.array([[0, 0, 0]])
    pairs = map_search_bruteforce(np.empty((0, 4), dtype=np.int64),
                                  np.empty((0, 4), dtype=np.int64), off, 1)
    assert pairs[0].shape == (0, 2)


def test_bruteforce_single_coincident_point():
    coords = np.array([[0, 1, 1, 1]])
    off = np.array([[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1)
                    for dz in (-1, 0, 1)])
    pairs = map_search_bruteforce(coords, coords, off, 1)
    sizes = [p.shape[0] for p in pairs]
    assert sum(sizes) == 1 and sizes[13] == 1


def test_downsample_reference_handles_stride1(rng):
    coords = np.array([[0, 1, 2, 3]])
    np.testing.assert_array_equal(
        downsample_coords_reference(coords, 2, 1, (4, 4, 4)), coords)


def test_compare_identical(rng):
    t = random_tensor(rng, (6, 6, 6), 0.3, 2)
    grid = dense_grid(t.coords, t.features, t.boundary)
    report = compare(t, grid, 1e-9, active=t.coords)
    assert report.passed
    assert report.max_abs_diff == 0.0
    assert "PASS" in report.summary()


def test_compare_perturbed_element_located(rng):
    t = random_tensor(rng, (6, 6, 6), 0.3, 2)
    grid = dense_grid(t.coords, t.features, t.boundary)
    feats = t.features.copy()
    feats[7, 1] += 0.5
    bad = t.replace_features(feats)
    report = compare(bad, grid, 1e-3, active=t.coords)
    assert not report.passed
    np.testing.assert_array_equal(report.worst_coord, t.coords[7])
    assert "FAIL" in report.summary()


def test_compare_coordinate_mismatch(rng):
    t = random_tensor(rng, (6, 6, 6), 0.3, 2)
    grid = dense_grid(t.coords, t.features, t.boundary)
    report = compare(t, grid, 1e-9, active=t.coords[:-1])
    assert not report.passed
    assert report.extra.shape[0] == 1
    assert "extra" in report.summary()


def test_grid_cap_guard():
    with pytest.raises(ValueError, match="capped"):
        dense_grid(np.empty((0, 4), dtype=np.int64), np.empty((0, 1)), (64, 64, 64))


def test_report_is_dataclass():
    report = ComparisonReport(0.0, 0.0, np.empty((0, 4), int), np.empty((0, 4), int),
                              True, 1e-5)
    assert report.passed and report.tolerance == 1e-5
