"""Independent reference implementations used to validate the engine.

Everything here recomputes from first principles: offsets come from a local
``itertools.product`` enumeration, convolution is the literal double sum over
offsets and inputs on a dense grid, and map search is a linear
coordinate-equality scan.  None of the engine's index, plan, or grouping code
is reused, so agreement between the two sides is meaningful evidence.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

# Keeps desk-scale oracle runs comfortably under a minute.
MAX_CELLS_PER_BATCH = 32**3


def _offsets(dim: int, kernel_size: int) -> np.ndarray:
    if kernel_size % 2 == 1:
        lo = -(kernel_size - 1) // 2
    else:
        lo = 0
    return np.array(list(product(range(lo, lo + kernel_size), repeat=dim)), dtype=np.int64)


def _check_cells(boundary) -> None:
    cells = 1
    for b in boundary:
        cells *= int(b)
    if cells > MAX_CELLS_PER_BATCH:
        raise ValueError(f"oracle grids are capped at {MAX_CELLS_PER_BATCH} cells per batch")


def dense_grid(coords: np.ndarray, features: np.ndarray, boundary,
               batch_size: int = 1) -> np.ndarray:
    """Scatter sparse rows onto a zero-filled (batch, *boundary, C) grid."""
    _check_cells(boundary)
    grid = np.zeros((batch_size, *boundary, features.shape[1]), dtype=np.float32)
    if coords.shape[0]:
        grid[tuple(np.asarray(coords, dtype=np.int64).T)] = features.astype(np.float32)
    return grid


def downsample_coords_reference(in_coords: np.ndarray, kernel_size: int, stride: int,
                                out_boundary, batch_size: int = 1) -> np.ndarray:
    """Unfused five-stage output-coordinate pipeline for strided layers.

    Each stage materializes its intermediate for the whole cloud: candidate
    dilation, modular check, boundary check, 1-D key conversion, unique.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64)
    if stride == 1:
        return in_coords
    dim = in_coords.shape[1] - 1
    off = _offsets(dim, kernel_size)
    b_out = np.asarray(out_boundary, dtype=np.int64)

    # stage 1: dilate every point by every offset
    cand = in_coords[:, None, 1:] - off[None, :, :]
    batch = np.broadcast_to(in_coords[:, None, 0], cand.shape[:2])
    cand = cand.reshape(-1, dim)
    batch = batch.reshape(-1)
    # stage 2: modular check
    mod_ok = (cand % stride == 0).all(axis=1)
    # stage 3: boundary check
    bound_ok = (cand >= 0).all(axis=1) & (cand < stride * b_out).all(axis=1)
    keep = mod_ok & bound_ok
    cand = cand[keep] // stride
    batch = batch[keep]
    # stage 4: flatten to 1-D keys
    keys = batch
    for d in range(dim):
        keys = keys * b_out[d] + cand[:, d]
    # stage 5: unique
    keys = np.unique(keys)

    out = np.empty((keys.shape[0], 1 + dim), dtype=np.int64)
    rem = keys.copy()
    for d in range(dim - 1, -1, -1):
        out[:, d + 1] = rem % b_out[d]
        rem //= b_out[d]
    out[:, 0] = rem
    return out


def dense_conv_reference(grid: np.ndarray, weights: np.ndarray, kernel_size: int,
                         stride: int, active_out: np.ndarray,
                         out_boundary) -> np.ndarray:
    """Convolution as the literal double sum, evaluated only at active outputs.

    ``out[q] = sum_delta sum_j [p_j == stride * q + delta] x_j . W_delta``;
    the indicator is realized by reading the dense input grid (inactive cells
    are zero and contribute nothing).
    """
    _check_cells(grid.shape[1:-1])
    _check_cells(out_boundary)
    dim = grid.ndim - 2
    off = _offsets(dim, kernel_size)
    active_out = np.asarray(active_out, dtype=np.int64)
    in_bounds = np.asarray(grid.shape[1:-1], dtype=np.int64)
    out = np.zeros((grid.shape[0], *out_boundary, weights.shape[2]), dtype=np.float32)
    if active_out.shape[0] == 0:
        return out
    for n in range(off.shape[0]):
        p = stride * active_out[:, 1:] + off[n]
        ok = (p >= 0).all(axis=1) & (p < in_bounds).all(axis=1)
        if not ok.any():
            continue
        q = active_out[ok]
        src = grid[(q[:, 0], *p[ok].T)].astype(np.float32)
        out[tuple(q.T)] += src @ weights[n]
    return out


def dense_transposed_conv_reference(grid: np.ndarray, weights: np.ndarray,
                                    kernel_size: int, stride: int,
                                    active_out: np.ndarray, out_boundary) -> np.ndarray:
    """Transposed counterpart: ``out[u] += x[q] . W_delta`` for u = stride*q + delta,
    evaluated only at the given active outputs (the upsampled coordinate set)."""
    _check_cells(grid.shape[1:-1])
    _check_cells(out_boundary)
    dim = grid.ndim - 2
    off = _offsets(dim, kernel_size)
    active_out = np.asarray(active_out, dtype=np.int64)
    down_bounds = np.asarray(grid.shape[1:-1], dtype=np.int64)
    out = np.zeros((grid.shape[0], *out_boundary, weights.shape[2]), dtype=np.float32)
    if active_out.shape[0] == 0:
        return out
    for n in range(off.shape[0]):
        u = active_out[:, 1:] - off[n]
        ok = (u % stride == 0).all(axis=1) & (u >= 0).all(axis=1)
        q = u // stride
        ok &= (q < down_bounds).all(axis=1)
        if not ok.any():
            continue
        dst = active_out[ok]
        src = grid[(dst[:, 0], *q[ok].T)].astype(np.float32)
        out[tuple(dst.T)] += src @ weights[n]
    return out


def map_search_bruteforce(in_coords: np.ndarray, out_coords: np.ndarray,
                          offsets, stride: int) -> list[np.ndarray]:
    """Kernel map via an explicit coordinate-equality scan (no index).

    Returns one (m, 2) array of (input row, output row) pairs per offset,
    ordered by output row.
    """
    in_coords = np.asarray(in_coords, dtype=np.int64)
    out_coords = np.asarray(out_coords, dtype=np.int64)
    off = np.asarray(getattr(offsets, "offsets", offsets), dtype=np.int64)
    pairs = []
    probe = np.empty_like(out_coords)
    probe[:, 0] = out_coords[:, 0]
    for n in range(off.shape[0]):
        probe[:, 1:] = stride * out_coords[:, 1:] + off[n]
        if in_coords.shape[0] == 0 or out_coords.shape[0] == 0:
            pairs.append(np.empty((0, 2), dtype=np.int64))
            continue
        eq = (probe[:, None, :] == in_coords[None, :, :]).all(axis=2)
        k, j = np.nonzero(eq)
        pairs.append(np.stack([j, k], axis=1).astype(np.int64))
    return pairs


@dataclass
class ComparisonReport:
    """Engine-versus-oracle verdict for one run."""

    max_abs_diff: float
    max_rel_diff: float
    missing: np.ndarray          # oracle-active coords absent from the engine
    extra: np.ndarray            # engine coords the oracle does not activate
    passed: bool
    tolerance: float
    worst_coord: np.ndarray | None = None

    def summary(self) -> str:
        if self.passed:
            return (f"PASS: max abs diff {self.max_abs_diff:.3e} "
                    f"(tolerance {self.tolerance:.1e})")
        if self.missing.shape[0] or self.extra.shape[0]:
            parts = []
            if self.missing.shape[0]:
                parts.append(f"{self.missing.shape[0]} missing (first {self.missing[0].tolist()})")
            if self.extra.shape[0]:
                parts.append(f"{self.extra.shape[0]} extra (first {self.extra[0].tolist()})")
            return "FAIL: coordinate mismatch, " + ", ".join(parts)
        where = self.worst_coord.tolist() if self.worst_coord is not None else "?"
        return (f"FAIL: max abs diff {self.max_abs_diff:.3e} > {self.tolerance:.1e} "
                f"at coordinate {where}")


def compare(engine, oracle_grid: np.ndarray, tolerance: float,
            active: np.ndarray | None = None) -> ComparisonReport:
    """Compare an engine SparseTensor against an oracle dense grid.

    ``active`` is the oracle's active output set; when omitted it is taken
    from the grid's nonzero cells.  Passing requires set equality and a max
    feature difference within tolerance.
    """
    eng_coords = np.asarray(engine.coords, dtype=np.int64)
    if active is None:
        active = np.stack(np.nonzero(np.any(oracle_grid != 0, axis=-1)), axis=1)
    active = np.asarray(active, dtype=np.int64)

    eng_set = {tuple(row) for row in eng_coords.tolist()}
    ora_set = {tuple(row) for row in active.tolist()}
    missing = np.array(sorted(ora_set - eng_set), dtype=np.int64).reshape(-1, eng_coords.shape[1])
    extra = np.array(sorted(eng_set - ora_set), dtype=np.int64).reshape(-1, eng_coords.shape[1])

    if missing.shape[0] or extra.shape[0]:
        return ComparisonReport(float("inf"), float("inf"), missing, extra,
                                passed=False, tolerance=tolerance)

    ref = oracle_grid[tuple(eng_coords.T)].astype(np.float32) if eng_coords.shape[0] \
        else np.zeros_like(engine.features, dtype=np.float32)
    diff = np.abs(engine.features.astype(np.float32) - ref)
    max_abs = float(diff.max()) if diff.size else 0.0
    scale = float(np.abs(ref).max()) if ref.size else 0.0
    max_rel = max_abs / scale if scale > 0 else (0.0 if max_abs == 0 else float("inf"))
    worst = None
    if diff.size and max_abs > 0:
        worst = eng_coords[np.unravel_index(np.argmax(diff), diff.shape)[0]]
    return ComparisonReport(max_abs, max_rel, missing, extra,
                            passed=max_abs <= tolerance, tolerance=tolerance,
                            worst_coord=worst)


def run_network_reference(layers: list[dict], t_in) -> tuple[np.ndarray, np.ndarray, tuple, int]:
    """Forward a layer-description list on dense grids, sparsity respected.

    ``layers`` entries are plain dicts as produced by ``Network.describe()``.
    Pointwise transforms touch active sites only, matching sparse semantics.
    Returns ``(grid, active_coords, boundary, stride)`` of the final stage.
    """
    active = np.asarray(t_in.coords, dtype=np.int64)
    boundary = tuple(t_in.boundary)
    stride = t_in.stride
    batch = t_in.batch_size
    grid = dense_grid(active, np.asarray(t_in.features), boundary, batch)
    snapshots: dict[str, tuple[np.ndarray, tuple, int]] = {}

    for layer in layers:
        kind = layer["kind"]
        if kind == "conv":
            if layer.get("id"):
                snapshots[layer["id"]] = (active, boundary, stride)
            k, s = layer["kernel_size"], layer["stride"]
            if s == 1:
                out_boundary = boundary
                out_active = active
            else:
                out_boundary = tuple(-(-b // s) for b in boundary)
                out_active = downsample_coords_reference(active, k, s, out_boundary, batch)
            grid = dense_conv_reference(grid, layer["weights"], k, s, out_active, out_boundary)
            active, boundary, stride = out_active, out_boundary, stride * s
        elif kind == "inverse_conv":
            src_active, src_boundary, src_stride = snapshots[layer["reuse"]]
            grid = dense_transposed_conv_reference(
                grid, layer["weights"], layer["kernel_size"],
                stride // src_stride, src_active, src_boundary)
            active, boundary, stride = src_active, src_boundary, src_stride
        elif kind == "relu":
            grid = np.maximum(grid, 0.0)
        elif kind == "bias_add":
            grid[tuple(active.T)] += layer["bias"].astype(np.float32)
        elif kind == "bn_fold":
            at = tuple(active.T)
            grid[at] = grid[at] * layer["scale"].astype(np.float32) \
                + layer["shift"].astype(np.float32)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return grid, active, boundary, stride
