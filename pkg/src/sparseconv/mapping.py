"""Kernel-map construction: offset enumeration, coordinate indexes,
output-coordinate calculation, map search, and gather/scatter plans.

Map entries follow the output-side traversal convention: an entry ``(j, k)``
for offset index ``n`` means input coordinate ``p_j == stride * q_k + delta_n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .core import flatten_coords, unflatten_coords

MISS = -1

# Grid indexes refuse to allocate beyond this many cells (auto mode falls
# back to the hash index instead).
DEFAULT_GRID_CELL_CAP = 1 << 31

# Base of the per-dimension offset range for even kernel sizes.  Zero gives
# the {0, .., K-1} window; tests monkeypatch this to inject a wrong
# convention as a negative control.
EVEN_KERNEL_OFFSET_BASE = 0


class GridCapacityError(ValueError):
    """Grid index would exceed its cell cap; build a hash index instead."""


@dataclass(frozen=True, eq=False)
class KernelOffsets:
    """Ordered kernel offsets delta in Z^D, lexicographic.

    For odd K the window is centered, so offset ``n`` and offset
    ``K**D - 1 - n`` are negations of each other and the zero offset sits at
    index ``(K**D - 1) / 2``.
    """

    offsets: np.ndarray        # (K**D, D) int64
    kernel_size: int
    dim: int

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

    @property
    def volume(self) -> int:
        return self.offsets.shape[0]

    @property
    def center(self) -> int | None:
        """Index of the zero offset, or None for even kernel sizes."""
        if self.kernel_size % 2 == 1:
            return (self.volume - 1) // 2
        return None


def enumerate_offsets(dim: int, kernel_size: int) -> KernelOffsets:
    """All K**D kernel offsets in lexicographic order.

    Odd K spans the centered window {-(K-1)/2, .., (K-1)/2} per dimension;
    even K spans {0, .., K-1}.
    """
    if not 1 <= dim <= 4:
        raise ValueError("dim must be between 1 and 4")
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    if kernel_size % 2 == 1:
        lo = -(kernel_size - 1) // 2
    else:
        lo = EVEN_KERNEL_OFFSET_BASE
    axis = range(lo, lo + kernel_size)
    offsets = np.array(list(product(axis, repeat=dim)), dtype=np.int64)
    return KernelOffsets(offsets, kernel_size, dim)


class GridIndex:
    """Collision-free dense array over batch x boundary mapping coords to rows."""

    kind = "grid"

    def __init__(self, coords: np.ndarray, boundary, batch_size: int = 1,
                 cell_cap: int = DEFAULT_GRID_CELL_CAP):
        boundary = tuple(int(b) for b in boundary)
        cells = int(batch_size)
        for b in boundary:
            cells *= b
        if cells > cell_cap:
            raise GridCapacityError(
                f"grid index needs {cells} cells (cap {cell_cap}); use the hash index"
            )
        self.boundary = boundary
        self.batch_size = int(batch_size)
        self.size = coords.shape[0]
        self._bounds = np.asarray(boundary, dtype=np.int64)
        self._table = np.full(cells, MISS, dtype=np.int64)
        if self.size:
            keys = flatten_coords(coords, boundary, batch_size)
            self._table[keys] = np.arange(self.size, dtype=np.int64)

    def query(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate; MISS (-1) where absent."""
        coords = np.asarray(coords, dtype=np.int64)
        result = np.full(coords.shape[0], MISS, dtype=np.int64)
        ok = (
            (coords[:, 0] >= 0)
            & (coords[:, 0] < self.batch_size)
            & (coords[:, 1:] >= 0).all(axis=1)
            & (coords[:, 1:] < self._bounds).all(axis=1)
        )
        if ok.any():
            keys = flatten_coords(coords[ok], self.boundary, self.batch_size)
            result[ok] = self._table[keys]
        return result


class HashIndex:
    """Open-addressing table keyed by the flattened coordinate.

    Linear probing, load factor <= 0.5, table size a power of two; the hash
    is the flat key masked into the table.
    """

    kind = "hash"

    def __init__(self, coords: np.ndarray, boundary, batch_size: int = 1):
        self.boundary = tuple(int(b) for b in boundary)
        self.batch_size = int(batch_size)
        self.size = coords.shape[0]
        self._bounds = np.asarray(self.boundary, dtype=np.int64)
        table_size = 2
        while table_size < 2 * max(self.size, 1):
            table_size *= 2
        self._mask = table_size - 1
        self._keys = np.full(table_size, -1, dtype=np.int64)
        self._rows = np.zeros(table_size, dtype=np.int64)
        if self.size:
            self._insert(flatten_coords(coords, self.boundary, self.batch_size))

    def _insert(self, keys: np.ndarray) -> None:
        n = keys.shape[0]
        slots = keys & self._mask
        pending = np.arange(n, dtype=np.int64)
        while pending.size:
            s = slots[pending]
            order = np.argsort(s, kind="stable")
            s_sorted = s[order]
            first = np.ones(s_sorted.shape[0], dtype=bool)
            first[1:] = s_sorted[1:] != s_sorted[:-1]
            candidates = pending[order[first]]
            free = self._keys[slots[candidates]] == -1
            winners = candidates[free]
            self._keys[slots[winners]] = keys[winners]
            self._rows[slots[winners]] = winners
            placed = np.zeros(n, dtype=bool)
            placed[winners] = True
            pending = pending[~placed[pending]]
            # every remaining key now targets an occupied slot: probe onward
            slots[pending] = (slots[pending] + 1) & self._mask

    def query(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate; MISS (-1) where absent."""
        coords = np.asarray(coords, dtype=np.int64)
        result = np.full(coords.shape[0], MISS, dtype=np.int64)
        ok = (
            (coords[:, 0] >= 0)
            & (coords[:, 0] < self.batch_size)
            & (coords[:, 1:] >= 0).all(axis=1)
            & (coords[:, 1:] < self._bounds).all(axis=1)
        )
        if not ok.any():
            return result
        idx = np.nonzero(ok)[0]
        keys = flatten_coords(coords[idx], self.boundary, self.batch_size)
        slots = keys & self._mask
        while idx.size:
            stored = self._keys[slots]
            hit = stored == keys
            result[idx[hit]] = self._rows[slots[hit]]
            probe = (stored != -1) & ~hit
            idx = idx[probe]
            keys = keys[probe]
            slots = (slots[probe] + 1) & self._mask
        return result


CoordinateIndex = GridIndex | HashIndex


def build_index(coords: np.ndarray, kind: str, boundary, batch_size: int = 1,
                cell_cap: int = DEFAULT_GRID_CELL_CAP) -> CoordinateIndex:
    """Build a coordinate index.  ``kind`` is "grid", "hash", or "auto"
    (grid when the cell count fits the cap, hash otherwise)."""
    if kind == "grid":
        return GridIndex(coords, boundary, batch_size, cell_cap)
    if kind == "hash":
        return HashIndex(coords, boundary, batch_size)
    if kind == "auto":
        try:
            return GridIndex(coords, boundary, batch_size, cell_cap)
        except GridCapacityError:
            return HashIndex(coords, boundary, batch_size)
    raise ValueError(f"unknown index kind {kind!r}")


def downsample_boundary(boundary, stride: int) -> tuple[int, ...]:
    """Output extents of a strided layer: ceil(b / stride) per dimension."""
    return tuple(-(-int(b) // stride) for b in boundary)


def compute_output_coords(in_coords: np.ndarray, offsets: KernelOffsets, stride: int,
                          out_boundary, batch_size: int = 1,
                          chunk: int = 65536) -> np.ndarray:
    """Active output coordinates of a convolution layer.

    stride 1 preserves the input coordinates (same order).  For stride > 1
    each input point p emits the candidates (p - delta) / stride that pass
    the modular and boundary checks; candidates are reduced to flat keys in
    a single pass per input chunk and deduplicated with one final
    sort-unique, so the result is ordered by ascending flattened key.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    in_coords = np.asarray(in_coords, dtype=np.int64)
    if stride == 1:
        return in_coords
    b_out = np.asarray(out_boundary, dtype=np.int64)
    off = offsets.offsets
    key_chunks = []
    for lo in range(0, in_coords.shape[0], chunk):
        part = in_coords[lo:lo + chunk]
        u = part[:, None, 1:] - off[None, :, :]
        keep = (
            (u % stride == 0).all(axis=-1)
            & (u >= 0).all(axis=-1)
            & (u < stride * b_out).all(axis=-1)
        )
        rows, _ = np.nonzero(keep)
        q = u[keep] // stride
        cand = np.concatenate([part[rows, :1], q], axis=1)
        key_chunks.append(flatten_coords(cand, b_out, batch_size))
    keys = np.unique(np.concatenate(key_chunks)) if key_chunks else np.empty(0, np.int64)
    return unflatten_coords(keys, b_out, batch_size)


@dataclass(eq=False)
class KernelMap:
    """Per-offset lists of (input row, output row) pairs."""

    pairs: list[np.ndarray]      # one (m_n, 2) int64 array per offset
    offsets: KernelOffsets
    stride: int
    n_in: int
    n_out: int
    symmetric: bool = False      # upper half derived from the lower half

    @property
    def sizes(self) -> np.ndarray:
        return np.array([p.shape[0] for p in self.pairs], dtype=np.int64)

    @property
    def buffer_offsets(self) -> np.ndarray:
        """Cumulative start row of each offset's slice in a full gather buffer."""
        out = np.zeros(len(self.pairs) + 1, dtype=np.int64)
        np.cumsum(self.sizes, out=out[1:])
        return out

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    def swap_roles(self) -> "KernelMap":
        """Input/output roles exchanged per entry (used by inverse layers).

        Entries within each offset are re-sorted by the new output row.
        """
        swapped = []
        for p in self.pairs:
            q = p[:, ::-1]
            swapped.append(np.ascontiguousarray(q[np.argsort(q[:, 1], kind="stable")]))
        return KernelMap(swapped, self.offsets, self.stride, self.n_out, self.n_in)


def map_search(in_index: CoordinateIndex, out_coords: np.ndarray,
               offsets: KernelOffsets, stride: int,
               use_symmetry: bool | None = None) -> KernelMap:
    """Search the kernel map: entry (j, k) whenever stride*q_k + delta is an
    input coordinate.

    For stride-1 odd-K layers only offset indices up to the center are
    searched; the rest follow from the symmetry of submanifold maps.
    """
    out_coords = np.asarray(out_coords, dtype=np.int64)
    volume = offsets.volume
    center = offsets.center
    if use_symmetry is None:
        use_symmetry = stride == 1 and center is not None and volume > 1
    if use_symmetry and (stride != 1 or center is None):
        raise ValueError("symmetric search requires stride 1 and odd kernel size")

    searched = range(center + 1) if use_symmetry else range(volume)
    pairs: list[np.ndarray] = [np.empty((0, 2), dtype=np.int64)] * volume
    probe = np.empty_like(out_coords)
    probe[:, 0] = out_coords[:, 0]
    for n in searched:
        probe[:, 1:] = stride * out_coords[:, 1:] + offsets.offsets[n]
        j = in_index.query(probe)
        k = np.nonzero(j != MISS)[0]
        pairs[n] = np.stack([j[k], k], axis=1).astype(np.int64)

    kmap = KernelMap(pairs, offsets, stride, in_index.size, out_coords.shape[0])
    if use_symmetry:
        return derive_symmetric_maps(kmap)
    return kmap


def derive_symmetric_maps(half_map: KernelMap) -> KernelMap:
    """Complete a stride-1 odd-K kernel map from its searched lower half.

    ``M[K**D - 1 - n]`` holds the reversed pairs of ``M[n]``; the derived
    lists are re-sorted by output row so ordering stays deterministic.
    """
    if half_map.stride != 1:
        raise ValueError("symmetric maps exist only for stride-1 layers")
    center = half_map.offsets.center
    if center is None:
        raise ValueError("symmetric maps exist only for odd kernel sizes")
    volume = half_map.offsets.volume
    pairs: list[np.ndarray] = list(half_map.pairs)
    for n in range(center):
        rev = pairs[n][:, ::-1]
        pairs[volume - 1 - n] = np.ascontiguousarray(rev[np.argsort(rev[:, 1], kind="stable")])
    return KernelMap(pairs, half_map.offsets, half_map.stride,
                     half_map.n_in, half_map.n_out, symmetric=True)


@dataclass(eq=False)
class GatherScatterPlan:
    """Inverted indexes over a kernel map for locality-aware movement.

    Buffer row ``buffer_offsets[n] + i`` belongs to the i-th entry of offset
    n.  ``in_rows`` lists buffer rows grouped by input row (CSR via
    ``in_indptr``); ``out_rows`` likewise by output row.  Both groupings are
    permutations of ``range(total)``.
    """

    n_in: int
    n_out: int
    total: int
    row_input: np.ndarray        # (total,) input row per buffer row
    row_output: np.ndarray       # (total,) output row per buffer row
    buffer_offsets: np.ndarray   # (V + 1,) slice starts per offset
    in_indptr: np.ndarray        # (n_in + 1,)
    in_rows: np.ndarray          # (total,) buffer rows grouped by input
    out_indptr: np.ndarray       # (n_out + 1,)
    out_rows: np.ndarray         # (total,) buffer rows grouped by output
    skipped_offset: int | None = None

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.buffer_offsets)

    @property
    def in_counts(self) -> np.ndarray:
        return np.diff(self.in_indptr)

    @property
    def out_counts(self) -> np.ndarray:
        return np.diff(self.out_indptr)


def build_gather_scatter_plan(kmap: KernelMap, skip_center: bool = False) -> GatherScatterPlan:
    """Lay out the gather buffer and build both stationary indexes.

    ``skip_center`` drops the zero offset from the buffer (its contribution
    is computed without data movement on stride-1 layers); the slice table
    keeps a zero-width entry so offset indices stay aligned.
    """
    skipped = None
    sizes = kmap.sizes
    if skip_center:
        skipped = kmap.offsets.center
        if skipped is None or kmap.stride != 1:
            raise ValueError("skip_center requires a stride-1 odd-K map")
        sizes = sizes.copy()
        sizes[skipped] = 0
    buffer_offsets = np.zeros(len(kmap.pairs) + 1, dtype=np.int64)
    np.cumsum(sizes, out=buffer_offsets[1:])
    total = int(buffer_offsets[-1])

    kept = [kmap.pairs[n] for n in range(len(kmap.pairs)) if n != skipped]
    if kept and total:
        stacked = np.concatenate([p for p in kept if p.shape[0]], axis=0)
    else:
        stacked = np.empty((0, 2), dtype=np.int64)
    row_input = np.ascontiguousarray(stacked[:, 0])
    row_output = np.ascontiguousarray(stacked[:, 1])

    in_rows = np.argsort(row_input, kind="stable").astype(np.int64)
    in_indptr = np.zeros(kmap.n_in + 1, dtype=np.int64)
    np.cumsum(np.bincount(row_input, minlength=kmap.n_in), out=in_indptr[1:])
    out_rows = np.argsort(row_output, kind="stable").astype(np.int64)
    out_indptr = np.zeros(kmap.n_out + 1, dtype=np.int64)
    np.cumsum(np.bincount(row_output, minlength=kmap.n_out), out=out_indptr[1:])

    return GatherScatterPlan(
        n_in=kmap.n_in, n_out=kmap.n_out, total=total,
        row_input=row_input, row_output=row_output,
        buffer_offsets=buffer_offsets,
        in_indptr=in_indptr, in_rows=in_rows,
        out_indptr=out_indptr, out_rows=out_rows,
        skipped_offset=skipped,
    )
