"""Synthetic point-cloud generation: deterministic stand-ins for large
outdoor/indoor scans when benchmarking or tuning without real data."""

from __future__ import annotations

import numpy as np

from .pointio import write_point_file

KINDS = ("uniform", "gaussian_clusters", "lidar_rings")

# xy cluster centers as fractions of the extent (4 well-separated modes)
_CLUSTER_CENTERS = ((0.3, 0.3), (0.3, 0.7), (0.7, 0.3), (0.7, 0.7))


def synth_points(kind: str, n_points: int, extent: float, seed: int,
                 channels: int = 4) -> np.ndarray:
    """Generate an (n_points, 3 + channels) float32 cloud, reproducibly.

    "uniform" fills the extent box; "gaussian_clusters" draws from four
    separated blobs; "lidar_rings" concentrates points on concentric range
    rings around the box center, mimicking the radial sparsity gradient of a
    spinning scanner.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)

    if kind == "uniform":
        xyz = rng.uniform(0.0, extent, size=(n_points, 3))
    elif kind == "gaussian_clusters":
        centers = np.array([(cx * extent, cy * extent, 0.5 * extent)
                            for cx, cy in _CLUSTER_CENTERS])
        which = rng.integers(0, len(centers), size=n_points)
        xyz = centers[which] + rng.normal(0.0, 0.04 * extent, size=(n_points, 3))
        xyz = np.clip(xyz, 0.0, np.nextafter(extent, 0.0))
    else:
        radii = extent * np.array([0.08, 0.14, 0.2, 0.27, 0.35, 0.44])
        ring = rng.integers(0, radii.shape[0], size=n_points)
        r = radii[ring] + rng.normal(0.0, 0.01 * extent, size=n_points)
        theta = rng.uniform(0.0, 2 * np.pi, size=n_points)
        z = 0.5 * extent + rng.normal(0.0, 0.02 * extent, size=n_points)
        xyz = np.stack([
            0.5 * extent + r * np.cos(theta),
            0.5 * extent + r * np.sin(theta),
            z,
        ], axis=1)
        xyz = np.clip(xyz, 0.0, np.nextafter(extent, 0.0))

    feats = rng.standard_normal((n_points, channels))
    return np.concatenate([xyz, feats], axis=1).astype(np.float32)


def synth_to_file(path, kind: str, n_points: int, extent: float, seed: int,
                  channels: int = 4) -> np.ndarray:
    points = synth_points(kind, n_points, extent, seed, channels)
    write_point_file(path, points, spatial_dims=3)
    return points
