"""Data-movement accounting: analytic totals, per-plan traffic counts, a
warp-transaction model, and an LRU cache simulation over movement traces.

Element counts use the convention: a layer moves ``N1 = |M| (C_in + C_out)``
elements through the gather-write and scatter-read sides no matter what,
while the gather-read and scatter-write sides shrink to
``N2 = N_in C_in + N_out C_out`` under the locality-aware orders.  The ratio
``N1 / N2`` is the reuse factor the locality-aware orders can exploit.
"""

from __future__ import annotations

import csv
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .core import PrecisionMode

TRANSACTION_MODES = ("scalar_fp32", "scalar_fp16", "vector_fp16")


@dataclass(frozen=True)
class TransactionModel:
    transactions: int
    utilization: float


@dataclass
class TrafficReport:
    """Element-granular read/write counts for one layer's data movement."""

    gather_read: int          # feature source reads
    gather_write: int         # buffer writes
    scatter_read: int         # buffer reads
    scatter_write: int        # output result writes
    n_in: int
    n_out: int
    c_in: int
    c_out: int
    map_rows: int             # |M| covered by the plan
    order: str
    precision: PrecisionMode = PrecisionMode.FP32
    transactions: dict[str, TransactionModel] = field(default_factory=dict)

    @property
    def n1(self) -> int:
        return self.map_rows * (self.c_in + self.c_out)

    @property
    def n2(self) -> int:
        return self.n_in * self.c_in + self.n_out * self.c_out

    @property
    def reuse_factor(self) -> float:
        return self.n1 / self.n2 if self.n2 else 0.0

    @property
    def total_elements(self) -> int:
        return self.gather_read + self.gather_write + self.scatter_read + self.scatter_write

    @property
    def total_bytes(self) -> int:
        return self.total_elements * self.precision.element_bytes

    def as_dict(self) -> dict:
        out = {
            "order": self.order,
            "precision": self.precision.value,
            "n_in": self.n_in,
            "n_out": self.n_out,
            "c_in": self.c_in,
            "c_out": self.c_out,
            "gather_read": self.gather_read,
            "gather_write": self.gather_write,
            "scatter_read": self.scatter_read,
            "scatter_write": self.scatter_write,
            "gather_read_bytes": self.gather_read * self.precision.element_bytes,
            "gather_write_bytes": self.gather_write * self.precision.element_bytes,
            "scatter_read_bytes": self.scatter_read * self.precision.element_bytes,
            "scatter_write_bytes": self.scatter_write * self.precision.element_bytes,
            "n1": self.n1,
            "n2": self.n2,
            "reuse_factor": self.reuse_factor,
            "map_rows": self.map_rows,
            "total_bytes": self.total_bytes,
        }
        for mode, tm in self.transactions.items():
            out[f"transactions_{mode}"] = tm.transactions
            out[f"utilization_{mode}"] = tm.utilization
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["field", "value"])
        for key, value in sorted(self.as_dict().items()):
            writer.writerow([key, value])
        return buf.getvalue()


def _with_transactions(report: TrafficReport) -> TrafficReport:
    for mode in TRANSACTION_MODES:
        report.transactions[mode] = model_transactions(report.total_elements, mode)
    return report


def theoretical_totals(kmap, n_in: int, n_out: int, c_in: int, c_out: int,
                       precision: PrecisionMode = PrecisionMode.FP32) -> TrafficReport:
    """Worst-case (weight-stationary) movement volume implied by a map.

    ``kmap`` may be a kernel map, a plan, or a plain row count |M|.
    """
    rows = int(np.asarray(kmap.sizes).sum()) if hasattr(kmap, "sizes") else int(kmap)
    report = TrafficReport(
        gather_read=rows * c_in, gather_write=rows * c_in,
        scatter_read=rows * c_out, scatter_write=rows * c_out,
        n_in=n_in, n_out=n_out, c_in=c_in, c_out=c_out,
        map_rows=rows, order="weight_stationary", precision=precision,
    )
    return _with_transactions(report)


def count_traffic(plan, order: str, c_in: int, c_out: int,
                  precision: PrecisionMode = PrecisionMode.FP32) -> TrafficReport:
    """Tally element movement for a plan under a concrete access order.

    Weight-stationary reads one feature row per map entry and writes one
    output row per map entry.  The locality-aware orders read every feature
    row exactly once and write every output row exactly once; the buffer
    sides stay at one row per map entry either way.
    """
    if order not in ("weight_stationary", "locality_aware"):
        raise ValueError(f"unknown traffic order {order!r}")
    rows = int(plan.total)
    if order == "weight_stationary":
        gather_read = rows * c_in
        scatter_write = rows * c_out
    else:
        gather_read = int(plan.n_in) * c_in
        scatter_write = int(plan.n_out) * c_out
    report = TrafficReport(
        gather_read=gather_read, gather_write=rows * c_in,
        scatter_read=rows * c_out, scatter_write=scatter_write,
        n_in=int(plan.n_in), n_out=int(plan.n_out), c_in=c_in, c_out=c_out,
        map_rows=rows, order=order, precision=precision,
    )
    return _with_transactions(report)


def model_transactions(n_elements: int, mode: str, transaction_bytes: int = 128,
                       lanes: int = 32) -> TransactionModel:
    """Memory transactions for a warp-style contiguous access pattern.

    Scalar fp32 lanes fill a transaction exactly; scalar fp16 lanes issue the
    same number of transactions at half utilization; paired (vectorized) fp16
    lanes halve the transaction count back to full utilization.
    """
    if mode not in TRANSACTION_MODES:
        raise ValueError(f"unknown transaction mode {mode!r}")
    if n_elements <= 0:
        return TransactionModel(0, 0.0)
    if mode == "scalar_fp32":
        txns = -(-n_elements // lanes)
        payload = n_elements * 4
    elif mode == "scalar_fp16":
        # one lane still owns one element, so the count matches fp32
        txns = -(-n_elements // lanes)
        payload = n_elements * 2
    else:  # vector_fp16: each lane moves two elements
        txns = -(-n_elements // (2 * lanes))
        payload = n_elements * 2
    utilization = min(1.0, payload / (txns * transaction_bytes))
    return TransactionModel(int(txns), utilization)


@dataclass(frozen=True)
class CacheModel:
    """Line-granular cache for the LRU simulation."""

    capacity_bytes: int
    line_bytes: int = 64
    ways: int | None = None      # None = fully associative

    def __post_init__(self):
        if self.capacity_bytes < self.line_bytes:
            raise ValueError("capacity must hold at least one line")

    @property
    def capacity_lines(self) -> int:
        return self.capacity_bytes // self.line_bytes


@dataclass(frozen=True)
class _Regions:
    """Byte layout of the movement arena: features, both buffers, output."""

    feature_base: int
    buffer_in_base: int
    buffer_out_base: int
    output_base: int
    in_row_bytes: int
    out_row_bytes: int


def _layout(plan, c_in: int, c_out: int, element_bytes: int, line_bytes: int) -> _Regions:
    def up(x):
        return -(-x // line_bytes) * line_bytes

    in_row = c_in * element_bytes
    out_row = c_out * element_bytes
    feature_base = 0
    buffer_in_base = up(feature_base + plan.n_in * in_row)
    buffer_out_base = up(buffer_in_base + plan.total * in_row)
    output_base = up(buffer_out_base + plan.total * out_row)
    return _Regions(feature_base, buffer_in_base, buffer_out_base, output_base,
                    in_row, out_row)


def _row_lines(base: int, rows: np.ndarray, row_bytes: int,
               line_bytes: int) -> tuple[np.ndarray, np.ndarray]:
    """Line IDs touched by each row access, flattened in access order."""
    rows = np.asarray(rows, dtype=np.int64)
    start = (base + rows * row_bytes) // line_bytes
    stop = (base + (rows + 1) * row_bytes - 1) // line_bytes
    counts = (stop - start + 1).astype(np.int64)
    total = int(counts.sum())
    first_of = np.repeat(start, counts)
    within = np.arange(total, dtype=np.int64) - np.repeat(
        np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return first_of + within, counts


def _interleave(a: np.ndarray, b: np.ndarray, ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """Merge two per-access line streams so access i contributes its ``a``
    lines then its ``b`` lines."""
    oa = np.concatenate([[0], np.cumsum(ca)])
    ob = np.concatenate([[0], np.cumsum(cb)])
    out = np.empty(a.shape[0] + b.shape[0], dtype=np.int64)
    pos = 0
    for i in range(ca.shape[0]):
        na = int(ca[i])
        nb = int(cb[i])
        out[pos:pos + na] = a[oa[i]:oa[i] + na]
        pos += na
        out[pos:pos + nb] = b[ob[i]:ob[i] + nb]
        pos += nb
    return out


def movement_trace(plan, kind: str, c_in: int, c_out: int,
                   precision: PrecisionMode = PrecisionMode.FP32,
                   line_bytes: int = 64) -> np.ndarray:
    """Cache-line access trace of the gather/scatter movement for a plan.

    ``kind`` selects the route: "weight_interleaved" is the per-offset
    gather, multiply, scatter loop; "weight_fused" separates the phases but
    keeps offset-major order; "locality_fused" separates the phases and
    walks inputs (gather) and outputs (scatter) instead.
    """
    eb = precision.element_bytes
    reg = _layout(plan, c_in, c_out, eb, line_bytes)
    starts = plan.buffer_offsets
    pieces: list[np.ndarray] = []

    def gather_pair(buffer_rows, feature_rows):
        reads, cr = _row_lines(reg.feature_base, feature_rows, reg.in_row_bytes, line_bytes)
        writes, cw = _row_lines(reg.buffer_in_base, buffer_rows, reg.in_row_bytes, line_bytes)
        return _interleave(reads, writes, cr, cw)

    def scatter_pair(buffer_rows, output_rows):
        reads, cr = _row_lines(reg.buffer_out_base, buffer_rows, reg.out_row_bytes, line_bytes)
        writes, cw = _row_lines(reg.output_base, output_rows, reg.out_row_bytes, line_bytes)
        return _interleave(reads, writes, cr, cw)

    if kind == "weight_interleaved":
        for n in range(starts.shape[0] - 1):
            rows = np.arange(starts[n], starts[n + 1], dtype=np.int64)
            if rows.size == 0:
                continue
            pieces.append(gather_pair(rows, plan.row_input[rows]))
            pieces.append(scatter_pair(rows, plan.row_output[rows]))
    elif kind == "weight_fused":
        all_rows = np.arange(plan.total, dtype=np.int64)
        pieces.append(gather_pair(all_rows, plan.row_input))
        pieces.append(scatter_pair(all_rows, plan.row_output))
    elif kind == "locality_fused":
        # each feature row is read once, then fanned out to its buffer rows
        active_in = np.nonzero(plan.in_counts)[0]
        reads, cr = _row_lines(reg.feature_base, active_in, reg.in_row_bytes, line_bytes)
        writes, cw = _row_lines(reg.buffer_in_base, plan.in_rows, reg.in_row_bytes, line_bytes)
        cw_per_input = np.add.reduceat(
            cw, plan.in_indptr[:-1][plan.in_counts > 0]) if active_in.size else np.empty(0, np.int64)
        pieces.append(_interleave(reads, writes, cr, cw_per_input))
        # each output row gathers its partial sums, then is written once
        active_out = np.nonzero(plan.out_counts)[0]
        reads, cr = _row_lines(reg.buffer_out_base, plan.out_rows, reg.out_row_bytes, line_bytes)
        cr_per_output = np.add.reduceat(
            cr, plan.out_indptr[:-1][plan.out_counts > 0]) if active_out.size else np.empty(0, np.int64)
        writes, cw = _row_lines(reg.output_base, active_out, reg.out_row_bytes, line_bytes)
        pieces.append(_interleave(reads, writes, cr_per_output, cw))
    else:
        raise ValueError(f"unknown trace kind {kind!r}")

    if not pieces:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(pieces)


def footprint_bytes(plan, c_in: int, c_out: int,
                    precision: PrecisionMode = PrecisionMode.FP32,
                    line_bytes: int = 64) -> int:
    """Total byte extent of the regions a movement trace touches."""
    eb = precision.element_bytes
    reg = _layout(plan, c_in, c_out, eb, line_bytes)
    return reg.output_base + plan.n_out * reg.out_row_bytes


def simulate_cache(trace: np.ndarray, cache: CacheModel) -> int:
    """Misses of an LRU cache replaying a line-granular trace."""
    capacity = cache.capacity_lines
    if cache.ways is None:
        resident: OrderedDict[int, None] = OrderedDict()
        misses = 0
        for line in trace.tolist():
            if line in resident:
                resident.move_to_end(line)
            else:
                misses += 1
                resident[line] = None
                if len(resident) > capacity:
                    resident.popitem(last=False)
        return misses
    n_sets = max(capacity // cache.ways, 1)
    sets: list[OrderedDict[int, None]] = [OrderedDict() for _ in range(n_sets)]
    misses = 0
    for line in trace.tolist():
        bucket = sets[line % n_sets]
        if line in bucket:
            bucket.move_to_end(line)
        else:
            misses += 1
            bucket[line] = None
            if len(bucket) > cache.ways:
                bucket.popitem(last=False)
    return misses
