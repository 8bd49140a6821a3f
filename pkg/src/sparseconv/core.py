"""Core sparse-tensor types: voxelization, precision handling, dense bridging.

A coordinate row is ``(batch, x, y, z)`` (generally ``(batch, *spatial)`` for
1 to 4 spatial dims), stored at the tensor's own stride level.  The cumulative
downsampling factor relative to the voxel lattice is tracked separately in
``SparseTensor.stride``, so index lookups never have to divide coordinates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

FP16_MAX = float(np.finfo(np.float16).max)

# to_dense() refuses grids larger than this many elements (cells * channels).
DEFAULT_DENSE_CAP = 1 << 27

_FEATURE_DTYPES = (np.dtype(np.float32), np.dtype(np.float16))


class PrecisionMode(Enum):
    """Feature storage precision.

    FP16_STORAGE keeps feature matrices in binary16 at rest; every reduction
    (matmul, scatter-accumulate) still runs in at least 32-bit.
    """

    FP32 = "fp32"
    FP16_STORAGE = "fp16"

    @property
    def storage_dtype(self) -> np.dtype:
        if self is PrecisionMode.FP16_STORAGE:
            return np.dtype(np.float16)
        return np.dtype(np.float32)

    @property
    def element_bytes(self) -> int:
        return self.storage_dtype.itemsize


def flatten_coords(coords: np.ndarray, boundary, batch_size: int = 1) -> np.ndarray:
    """Batch-major row-major flat key for coordinate rows.

    ``key = (((batch * bx + x) * by + y) * bz + z)``, generalized over D.
    Keys of distinct in-bounds coordinates are distinct, and ascending key
    order is batch-major then x, y, z lexicographic.
    """
    boundary = tuple(int(b) for b in boundary)
    total = int(batch_size)
    for b in boundary:
        if b <= 0:
            raise ValueError("boundary extents must be positive")
        total *= b
    if total >= 1 << 62:
        raise ValueError("coordinate space too large to key into int64")
    coords = np.asarray(coords, dtype=np.int64)
    key = coords[:, 0].copy()
    for d, b in enumerate(boundary):
        key *= b
        key += coords[:, d + 1]
    return key


def unflatten_coords(keys: np.ndarray, boundary, batch_size: int = 1) -> np.ndarray:
    """Inverse of :func:`flatten_coords` for in-range keys."""
    boundary = tuple(int(b) for b in boundary)
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], 1 + len(boundary)), dtype=np.int64)
    rem = keys.copy()
    for d in range(len(boundary) - 1, -1, -1):
        out[:, d + 1] = rem % boundary[d]
        rem //= boundary[d]
    out[:, 0] = rem
    return out


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Unique integer coordinates paired with a feature row each.

    Immutable after construction; the backing arrays are marked read-only so
    the tensor can be shared across threads.
    """

    coords: np.ndarray        # (N, 1 + D) int64, batch column first
    features: np.ndarray      # (N, C) float32 or float16
    stride: int = 1
    boundary: tuple[int, ...] = ()
    batch_size: int = 1

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        features = np.ascontiguousarray(self.features)
        if features.dtype not in _FEATURE_DTYPES:
            features = features.astype(np.float32)
        boundary = tuple(int(b) for b in self.boundary)
        if coords.ndim != 2 or coords.shape[1] != 1 + len(boundary):
            raise ValueError(
                f"coords shape {coords.shape} does not match boundary of rank {len(boundary)}"
            )
        if not 1 <= len(boundary) <= 4:
            raise ValueError("spatial rank must be between 1 and 4")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError("feature rows must match coordinate rows")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        if coords.shape[0]:
            if coords[:, 0].min() < 0 or coords[:, 0].max() >= self.batch_size:
                raise ValueError("batch index out of range")
            spatial = coords[:, 1:]
            if spatial.min() < 0 or (spatial >= np.asarray(boundary)).any():
                raise ValueError("coordinate outside boundary")
            keys = flatten_coords(coords, boundary, self.batch_size)
            if np.unique(keys).shape[0] != coords.shape[0]:
                raise ValueError("coordinate rows must be unique")
        coords.setflags(write=False)
        features.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "batch_size", int(self.batch_size))

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    @property
    def spatial_dims(self) -> int:
        return len(self.boundary)

    def replace_features(self, features: np.ndarray) -> "SparseTensor":
        """Same coordinates, new feature matrix."""
        return SparseTensor(self.coords, features, self.stride, self.boundary, self.batch_size)


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """Convolution weights: one C_in x C_out matrix per kernel offset."""

    weights: np.ndarray       # (K**D, C_in, C_out) float32
    kernel_size: int
    dim: int

    def __post_init__(self):
        weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        if weights.ndim != 3:
            raise ValueError("weights must be a (K**D, C_in, C_out) stack")
        if weights.shape[0] != self.kernel_size**self.dim:
            raise ValueError(
                f"expected {self.kernel_size**self.dim} weight slices, got {weights.shape[0]}"
            )
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]


def voxelize(points: np.ndarray, voxel_size: float, reduce: str = "mean",
             spatial_dims: int = 3) -> SparseTensor:
    """Quantize a raw point cloud onto an integer voxel lattice.

    The first ``spatial_dims`` columns of ``points`` are positions, the rest
    are per-point features.  Cells are ``floor((p - min_corner) / voxel_size)``
    so every coordinate is non-negative; points landing in the same cell are
    merged with ``reduce`` ("mean" or "first").  Rows come out sorted by
    ascending flattened key for determinism across index backends.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("empty cloud")
    if points.shape[1] < spatial_dims:
        raise ValueError(f"points need at least {spatial_dims} columns")
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if reduce not in ("mean", "first"):
        raise ValueError(f"unknown reduce {reduce!r}")

    xyz = points[:, :spatial_dims]
    feats = points[:, spatial_dims:]
    cells = np.floor((xyz - xyz.min(axis=0)) / voxel_size).astype(np.int64)
    boundary = tuple(int(m) + 1 for m in cells.max(axis=0))

    coords_full = np.concatenate(
        [np.zeros((cells.shape[0], 1), dtype=np.int64), cells], axis=1
    )
    keys = flatten_coords(coords_full, boundary, batch_size=1)
    uniq, first_idx, inverse = np.unique(keys, return_index=True, return_inverse=True)
    n_vox = uniq.shape[0]

    if reduce == "first":
        merged = feats[first_idx].astype(np.float32)
    else:
        counts = np.bincount(inverse, minlength=n_vox).astype(np.float64)
        merged = np.empty((n_vox, feats.shape[1]), dtype=np.float32)
        for c in range(feats.shape[1]):
            sums = np.bincount(inverse, weights=feats[:, c], minlength=n_vox)
            merged[:, c] = (sums / counts).astype(np.float32)

    out_coords = unflatten_coords(uniq, boundary, batch_size=1)
    return SparseTensor(out_coords, merged, stride=1, boundary=boundary, batch_size=1)


def quantize_features(t: SparseTensor, mode: PrecisionMode) -> SparseTensor:
    """Convert feature storage to the requested precision.

    FP16_STORAGE rounds each element to the nearest binary16 value; elements
    beyond the binary16 range saturate to +/- max-finite and a warning with
    the saturation count is emitted.  FP32 is the identity.
    """
    if mode is PrecisionMode.FP32:
        if t.features.dtype == np.float32:
            return t
        return t.replace_features(t.features.astype(np.float32))
    with np.errstate(over="ignore"):
        q = t.features.astype(np.float16)
    overflow = np.isinf(q) & np.isfinite(t.features)
    n_over = int(overflow.sum())
    if n_over:
        q = q.copy()
        q[overflow] = np.sign(t.features[overflow]).astype(np.float16) * np.float16(FP16_MAX)
        warnings.warn(f"{n_over} feature element(s) saturated to the fp16 range")
    return t.replace_features(q)


def to_dense(t: SparseTensor, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Materialize the tensor as a dense (batch, *boundary, C) grid.

    Inactive sites are zero.  Refuses grids above ``cap`` total elements.
    """
    cells = t.batch_size
    for b in t.boundary:
        cells *= b
    if cells * max(t.num_channels, 1) > cap:
        raise ValueError(
            f"dense grid of {cells * t.num_channels} elements exceeds cap {cap}"
        )
    grid = np.zeros((t.batch_size, *t.boundary, t.num_channels), dtype=t.features.dtype)
    if t.num_points:
        grid[tuple(t.coords.T)] = t.features
    return grid


def sparsify(grid: np.ndarray, stride: int = 1) -> SparseTensor:
    """Inverse of :func:`to_dense`: collect rows with any nonzero channel."""
    if grid.ndim < 3:
        raise ValueError("grid must be (batch, *spatial, C)")
    active = np.nonzero(np.any(grid != 0, axis=-1))
    coords = np.stack(active, axis=1).astype(np.int64)
    features = grid[active]
    boundary = grid.shape[1:-1]
    return SparseTensor(coords, features, stride=stride, boundary=boundary,
                        batch_size=grid.shape[0])
