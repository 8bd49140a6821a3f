"""Gather-matmul-scatter execution: locality-aware data movement, grouped
matrix multiplication, and the layer-level forward passes.

Feature buffers are plain ``(|M|, C)`` arrays partitioned by kernel offset
through the plan's cumulative slice table.  Matmuls accumulate in float32 and
scatters in float64 regardless of the storage precision, and every route
(fused or per-offset, either access order, any grouping) reduces each output
in ascending buffer-row order, so results are reproducible.
"""

from __future__ import annotations

import time
import warnings
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass

import numpy as np

from . import kernels, traffic
from .core import PrecisionMode, SparseTensor, WeightTensor
from .mapping import (
    DEFAULT_GRID_CELL_CAP,
    GatherScatterPlan,
    KernelMap,
    KernelOffsets,
    build_gather_scatter_plan,
    build_index,
    compute_output_coords,
    downsample_boundary,
    enumerate_offsets,
    map_search,
)

GATHER_ORDERS = ("weight_stationary", "input_stationary")
SCATTER_ORDERS = ("weight_stationary", "output_stationary")


class StageTimer:
    """Accumulates wall-clock per (layer, stage) over one forward pass."""

    STAGES = ("mapping", "gather", "matmul", "scatter", "other")

    def __init__(self):
        self.samples: dict[tuple[str, str], float] = {}

    @contextmanager
    def section(self, layer: str, stage: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            key = (layer, stage)
            self.samples[key] = self.samples.get(key, 0.0) + time.perf_counter() - t0


def _timed(timer: StageTimer | None, layer: str, stage: str):
    return timer.section(layer, stage) if timer is not None else nullcontext()


@dataclass(frozen=True)
class LayerStrategy:
    """Tuned grouping parameters for one layer.

    ``eps`` bounds the padding redundancy tolerated inside a batched group;
    ``threshold`` is the row count below which a group runs as one batched
    multiply instead of sequential per-offset multiplies.
    """

    eps: float = 0.0
    threshold: float = 0.0
    index_kind: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        if self.threshold < 0:
            raise ValueError("threshold must be non-negative")

    @staticmethod
    def separate() -> "LayerStrategy":
        """One sequential matmul per offset."""
        return LayerStrategy(0.0, 0.0)

    @staticmethod
    def symmetric_pairs() -> "LayerStrategy":
        """Batch each offset with its mirror only."""
        return LayerStrategy(0.0, float("inf"))

    @staticmethod
    def dense_group() -> "LayerStrategy":
        """Everything in one padded batch."""
        return LayerStrategy(1.0, float("inf"))


@dataclass(frozen=True)
class LayerSpec:
    """Static description of a convolution layer."""

    kernel_size: int
    stride: int
    c_in: int
    c_out: int
    transposed: bool = False
    reuse_key: str | None = None
    index_kind: str | None = None
    strategy: LayerStrategy | None = None

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"unsupported stride {self.stride}")
        if self.transposed and not self.reuse_key:
            raise ValueError("transposed layers need the reuse key of a strided layer")


def resolve_strategy(spec: LayerSpec, strategy: LayerStrategy | None) -> LayerStrategy:
    """Per-layer strategy resolution: the explicit argument, then the
    LayerSpec override, then separate execution."""
    if strategy is not None:
        return strategy
    if spec.strategy is not None:
        return spec.strategy
    return LayerStrategy.separate()


@dataclass(eq=False)
class CachedMap:
    """A strided layer's kernel map plus its input-side geometry, kept so an
    inverse layer can replay the map with roles swapped."""

    kmap: KernelMap
    in_coords: np.ndarray
    in_boundary: tuple[int, ...]
    in_stride: int


@dataclass
class ExecOptions:
    """Per-call execution knobs; numerics are invariant under all of them."""

    order: str = "locality"            # "locality" | "weight"
    fused: bool = True                 # phase-separated gather/matmul/scatter
    index_kind: str | None = None      # overrides layer/strategy ("grid"/"hash"/"auto")
    grid_cell_cap: int = DEFAULT_GRID_CELL_CAP
    layer_label: str = "layer"
    timer: StageTimer | None = None
    traffic_log: list | None = None    # appends (label, TrafficReport)
    workload_log: list | None = None   # appends per-layer tuning records
    plan_log: list | None = None       # appends (label, GatherScatterPlan)

    def __post_init__(self):
        if self.order not in ("locality", "weight"):
            raise ValueError(f"unknown order {self.order!r}")
        if not self.fused and self.order == "locality":
            warnings.warn("locality order requires fused movement; using weight order")
            self.order = "weight"


def gather(features: np.ndarray, plan: GatherScatterPlan,
           order: str = "weight_stationary") -> np.ndarray:
    """Concatenate feature rows into the offset-partitioned buffer.

    Both orders yield bit-identical buffers; they differ only in traversal.
    Weight-stationary walks buffer rows offset by offset; input-stationary
    reads each feature row exactly once and fans it out to all destinations.
    Rows move as contiguous chunks, so copies vectorize.
    """
    if order not in GATHER_ORDERS:
        raise ValueError(f"unknown gather order {order!r}")
    if features.shape[0] != plan.n_in:
        raise ValueError("plan does not match the feature row count")
    if order == "weight_stationary":
        return features[plan.row_input]
    fast = kernels.gather_input_stationary(features, plan.in_rows, plan.in_indptr,
                                           plan.total)
    if fast is not None:
        return fast
    buffer = np.empty((plan.total, features.shape[1]), dtype=features.dtype)
    buffer[plan.in_rows] = np.repeat(features, plan.in_counts, axis=0)
    return buffer


def scatter_accumulate(buffer: np.ndarray, plan: GatherScatterPlan, n_out: int,
                       order: str = "weight_stationary",
                       out_dtype=np.float32) -> np.ndarray:
    """Accumulate buffer rows into output rows.

    Weight-stationary adds each offset's slice in turn; output-stationary
    reduces every output's sources together and writes each output row once.
    Both orders fold in ascending buffer-row order with a float64
    accumulator rounded once at the end, so the results are bit-identical.
    """
    if order not in SCATTER_ORDERS:
        raise ValueError(f"unknown scatter order {order!r}")
    if buffer.shape[0] != plan.total:
        raise ValueError("buffer rows do not match the plan")
    if plan.total == 0:
        return np.zeros((n_out, buffer.shape[1]), dtype=out_dtype)
    if order == "weight_stationary":
        acc = np.zeros((n_out, buffer.shape[1]), dtype=np.float64)
        starts = plan.buffer_offsets
        for n in range(starts.shape[0] - 1):
            sl = slice(starts[n], starts[n + 1])
            if sl.start == sl.stop:
                continue
            acc[plan.row_output[sl]] += buffer[sl]
        return acc.astype(out_dtype)
    if out_dtype == np.float32:
        fast = kernels.scatter_output_stationary(buffer, plan.out_rows,
                                                 plan.out_indptr, n_out)
        if fast is not None:
            return fast
    # bincount also walks buffer rows in ascending order, folding in float64
    acc = np.empty((n_out, buffer.shape[1]), dtype=out_dtype)
    for c in range(buffer.shape[1]):
        acc[:, c] = np.bincount(plan.row_output, weights=buffer[:, c],
                                minlength=n_out)
    return acc


def partition_groups(map_sizes, eps: float, schedule) -> list[tuple[int, int]]:
    """Greedy left-to-right grouping of the scheduled offsets.

    The first scheduled size always opens a group; the group absorbs the next
    size as long as the padding ratio ``1 - n_min / n_max`` stays within
    ``eps``.  Returns half-open position ranges into ``schedule``.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    sizes = np.asarray(map_sizes, dtype=np.int64)
    schedule = list(schedule)
    ranges = []
    i = 0
    while i < len(schedule):
        n_min = n_max = int(sizes[schedule[i]])
        start = i
        i += 1
        while i < len(schedule):
            n = int(sizes[schedule[i]])
            lo, hi = min(n_min, n), max(n_max, n)
            ratio = 0.0 if hi == 0 else 1.0 - lo / hi
            if ratio > eps:
                break
            n_min, n_max = lo, hi
            i += 1
        ranges.append((start, i))
    return ranges


@dataclass(frozen=True)
class MatmulGroup:
    start: int              # position range into the schedule
    end: int
    mode: str               # "batched" | "sequential"
    padded_rows: int = 0


@dataclass(frozen=True)
class GroupingStrategy:
    """Concrete partition of the scheduled offsets into matmul groups."""

    eps: float
    threshold: float
    schedule: tuple[int, ...]
    groups: tuple[MatmulGroup, ...]
    symmetric: bool
    volume: int

    def members(self, group: MatmulGroup) -> list[int]:
        """Offset indices executed by the group (mirrors included when the
        schedule pairs symmetric offsets)."""
        scheduled = list(self.schedule[group.start:group.end])
        if self.symmetric:
            scheduled += [self.volume - 1 - n for n in scheduled]
        return scheduled

    def validate(self, map_sizes) -> None:
        sizes = np.asarray(map_sizes, dtype=np.int64)
        if sizes.shape[0] != self.volume:
            raise ValueError("map sizes do not match the strategy volume")
        covered = []
        for g in self.groups:
            covered.extend(range(g.start, g.end))
            members = self.members(g)
            n_max = max((int(sizes[m]) for m in members), default=0)
            n_min = min((int(sizes[m]) for m in members), default=0)
            batched = n_max < self.threshold
            if (g.mode == "batched") != batched:
                raise ValueError("group mode disagrees with the threshold")
            if g.mode == "batched" and n_max > 0 and 1.0 - n_min / n_max > self.eps + 1e-12:
                raise ValueError("batched group exceeds the padding tolerance")
        if covered != list(range(len(self.schedule))):
            raise ValueError("groups do not partition the schedule")


def schedule_for(offsets: KernelOffsets, stride: int) -> tuple[list[int], bool]:
    """Which offsets the grouping scans, and whether mirrors ride along.

    Stride-1 odd-K layers schedule only the first half (center excluded, its
    contribution needs no data movement) and each scheduled offset executes
    together with its mirror.  Strided or even-K layers schedule everything.
    """
    center = offsets.center
    if stride == 1 and center is not None and offsets.volume > 1:
        return list(range(center)), True
    return list(range(offsets.volume)), False


def build_grouping(map_sizes, eps: float, threshold: float, schedule=None,
                   symmetric: bool = False) -> GroupingStrategy:
    """Assemble a GroupingStrategy for a concrete per-offset workload."""
    sizes = np.asarray(map_sizes, dtype=np.int64)
    if schedule is None:
        schedule = list(range(sizes.shape[0]))
    schedule = list(schedule)
    groups = []
    for start, end in partition_groups(sizes, eps, schedule):
        members = list(schedule[start:end])
        if symmetric:
            members += [sizes.shape[0] - 1 - n for n in members]
        n_max = max((int(sizes[m]) for m in members), default=0)
        if n_max < threshold:
            padded = sum(n_max - int(sizes[m]) for m in members)
            groups.append(MatmulGroup(start, end, "batched", padded))
        else:
            groups.append(MatmulGroup(start, end, "sequential", 0))
    return GroupingStrategy(eps, threshold, tuple(schedule), tuple(groups),
                            symmetric, sizes.shape[0])


def execute_groups(buffer: np.ndarray, weights: np.ndarray,
                   strategy: GroupingStrategy, map_sizes) -> np.ndarray:
    """Run the grouped multiplies over an offset-partitioned buffer.

    Batched groups pad every member slice with zero rows up to the group
    maximum and run one batched multiply; sequential groups run one multiply
    per offset.  Padded rows never reach the output buffer.  Returns the
    float32 partial-sum buffer.
    """
    sizes = np.asarray(map_sizes, dtype=np.int64)
    if sizes.shape[0] != weights.shape[0]:
        raise ValueError("map sizes do not match the weight slices")
    strategy.validate(sizes)
    starts = np.zeros(sizes.shape[0] + 1, dtype=np.int64)
    np.cumsum(sizes, out=starts[1:])
    if buffer.shape[0] != starts[-1]:
        raise ValueError("buffer rows do not match the map sizes")
    out = np.zeros((buffer.shape[0], weights.shape[2]), dtype=np.float32)

    for group in strategy.groups:
        members = strategy.members(group)
        if group.mode == "batched":
            n_max = max((int(sizes[m]) for m in members), default=0)
            if n_max == 0:
                continue
            padded = np.zeros((len(members), n_max, weights.shape[1]), dtype=np.float32)
            for i, m in enumerate(members):
                padded[i, :sizes[m]] = buffer[starts[m]:starts[m] + sizes[m]]
            prod = np.matmul(padded, weights[members])
            for i, m in enumerate(members):
                out[starts[m]:starts[m] + sizes[m]] = prod[i, :sizes[m]]
        else:
            for m in members:
                sl = slice(starts[m], starts[m] + sizes[m])
                if sl.start == sl.stop:
                    continue
                out[sl] = np.matmul(buffer[sl].astype(np.float32), weights[m])
    return out


def _movement_orders(order: str) -> tuple[str, str]:
    if order == "locality":
        return "input_stationary", "output_stationary"
    return "weight_stationary", "weight_stationary"


def _record_traffic(opts: ExecOptions, plan: GatherScatterPlan, c_in: int,
                    c_out: int, dtype) -> None:
    if opts.traffic_log is None:
        return
    precision = PrecisionMode.FP16_STORAGE if dtype == np.float16 else PrecisionMode.FP32
    order = "locality_aware" if opts.order == "locality" else "weight_stationary"
    opts.traffic_log.append(
        (opts.layer_label, traffic.count_traffic(plan, order, c_in, c_out, precision))
    )


def _record_workload(opts: ExecOptions, spec: LayerSpec, sizes: np.ndarray,
                     symmetric: bool, schedule: list[int],
                     in_coords, out_coords, boundary, batch_size: int) -> None:
    if opts.workload_log is None:
        return
    opts.workload_log.append({
        "layer": opts.layer_label,
        "map_sizes": np.asarray(sizes, dtype=np.int64),
        "schedule": list(schedule),
        "symmetric": symmetric,
        "c_in": spec.c_in,
        "c_out": spec.c_out,
        "kernel_size": spec.kernel_size,
        "stride": spec.stride,
        "in_coords": in_coords,
        "out_coords": out_coords,
        "boundary": tuple(boundary),
        "batch_size": batch_size,
    })


def _run_dataflow(features: np.ndarray, kmap: KernelMap, plan: GatherScatterPlan,
                  weights: np.ndarray, grouping: GroupingStrategy,
                  opts: ExecOptions, center: int | None) -> np.ndarray:
    """Shared core of conv and inverse forward: returns float32 output rows."""
    label = opts.layer_label
    timer = opts.timer
    gather_order, scatter_order = _movement_orders(opts.order)
    n_out = kmap.n_out

    if opts.fused:
        with _timed(timer, label, "gather"):
            buffer = gather(features, plan, gather_order)
        with _timed(timer, label, "matmul"):
            out_buffer = execute_groups(buffer, weights, grouping, plan.sizes)
            if center is not None:
                center_part = np.matmul(features.astype(np.float32), weights[center])
        with _timed(timer, label, "scatter"):
            out = scatter_accumulate(out_buffer, plan, n_out, scatter_order)
            if center is not None:
                out += center_part
        return out

    out = np.zeros((n_out, weights.shape[2]), dtype=np.float64)
    for n in range(len(kmap.pairs)):
        if n == plan.skipped_offset:
            continue
        pairs = kmap.pairs[n]
        if pairs.shape[0] == 0:
            continue
        with _timed(timer, label, "gather"):
            block = features[pairs[:, 0]]
        with _timed(timer, label, "matmul"):
            partial = np.matmul(block.astype(np.float32), weights[n])
        with _timed(timer, label, "scatter"):
            out[pairs[:, 1]] += partial
    if center is not None:
        with _timed(timer, label, "matmul"):
            out += np.matmul(features.astype(np.float32), weights[center])
    return out.astype(np.float32)


def sparse_conv_forward(t: SparseTensor, w: WeightTensor, spec: LayerSpec,
                        strategy: LayerStrategy | None = None,
                        map_cache: dict | None = None,
                        options: ExecOptions | None = None) -> SparseTensor:
    """One sparse convolution layer.

    Stride-1 layers keep the coordinate set; strided layers emit the
    downsampled set.  On stride-1 odd-K layers the center offset bypasses
    gather/scatter as a single full-matrix multiply.  The kernel map is
    stored in ``map_cache`` under the layer's reuse key for inverse layers.
    """
    opts = options or ExecOptions()
    if t.num_channels != spec.c_in or w.c_in != spec.c_in or w.c_out != spec.c_out:
        raise ValueError(
            f"channel mismatch: tensor {t.num_channels}, spec {spec.c_in}->{spec.c_out}, "
            f"weights {w.c_in}->{w.c_out}"
        )
    label = opts.layer_label
    timer = opts.timer
    storage = t.features.dtype
    strat = resolve_strategy(spec, strategy)

    if spec.kernel_size == 1 and spec.stride == 1:
        with _timed(timer, label, "matmul"):
            out = np.matmul(t.features.astype(np.float32), w.weights[0])
        _record_workload(opts, spec, np.array([t.num_points]), False, [0],
                         t.coords, t.coords, t.boundary, t.batch_size)
        return t.replace_features(out.astype(storage))

    offsets = enumerate_offsets(t.spatial_dims, spec.kernel_size)
    with _timed(timer, label, "mapping"):
        if spec.stride == 1:
            out_coords, out_boundary = t.coords, t.boundary
        else:
            out_boundary = downsample_boundary(t.boundary, spec.stride)
            out_coords = compute_output_coords(t.coords, offsets, spec.stride,
                                               out_boundary, t.batch_size)
        kind = opts.index_kind or strat.index_kind or spec.index_kind or "auto"
        index = build_index(t.coords, kind, t.boundary, t.batch_size, opts.grid_cell_cap)
        kmap = map_search(index, out_coords, offsets, spec.stride)
        skip_center = spec.stride == 1 and offsets.center is not None
        plan = build_gather_scatter_plan(kmap, skip_center=skip_center)
        if map_cache is not None and spec.reuse_key:
            map_cache[spec.reuse_key] = CachedMap(kmap, t.coords, t.boundary, t.stride)
    if opts.plan_log is not None:
        opts.plan_log.append((label, plan))

    schedule, symmetric = schedule_for(offsets, spec.stride)
    sizes = plan.sizes
    _record_workload(opts, spec, sizes, symmetric, schedule,
                     t.coords, out_coords, t.boundary, t.batch_size)
    grouping = build_grouping(sizes, strat.eps, strat.threshold, schedule, symmetric)
    center = offsets.center if skip_center else None
    out = _run_dataflow(t.features, kmap, plan, w.weights, grouping, opts, center)
    with _timed(timer, label, "other"):
        _record_traffic(opts, plan, spec.c_in, spec.c_out, storage)
        result = SparseTensor(out_coords, out.astype(storage),
                              stride=t.stride * spec.stride,
                              boundary=out_boundary, batch_size=t.batch_size)
    return result


def inverse_conv_forward(t: SparseTensor, w: WeightTensor, spec: LayerSpec,
                         map_cache: dict, strategy: LayerStrategy | None = None,
                         options: ExecOptions | None = None) -> SparseTensor:
    """Transposed layer that replays a cached strided map with roles swapped.

    Output coordinates are exactly the referenced layer's input coordinates;
    no index build or output-coordinate search happens here.
    """
    opts = options or ExecOptions()
    if t.num_channels != spec.c_in or w.c_in != spec.c_in or w.c_out != spec.c_out:
        raise ValueError("channel mismatch on inverse layer")
    if spec.reuse_key not in map_cache:
        raise KeyError(f"no cached map under reuse key {spec.reuse_key!r}")
    entry: CachedMap = map_cache[spec.reuse_key]
    if entry.kmap.n_out != t.num_points:
        raise ValueError("tensor does not match the cached map's output side")
    if entry.kmap.offsets.kernel_size != spec.kernel_size:
        raise ValueError("kernel size differs from the cached map")

    label = opts.layer_label
    timer = opts.timer
    storage = t.features.dtype
    strat = resolve_strategy(spec, strategy)
    with _timed(timer, label, "mapping"):
        swapped = entry.kmap.swap_roles()
        plan = build_gather_scatter_plan(swapped)
    if opts.plan_log is not None:
        opts.plan_log.append((label, plan))
    schedule = list(range(swapped.offsets.volume))
    sizes = plan.sizes
    _record_workload(opts, spec, sizes, False, schedule,
                     t.coords, entry.in_coords, entry.in_boundary, t.batch_size)
    grouping = build_grouping(sizes, strat.eps, strat.threshold, schedule, False)
    out = _run_dataflow(t.features, swapped, plan, w.weights, grouping, opts, None)
    with _timed(timer, label, "other"):
        _record_traffic(opts, plan, spec.c_in, spec.c_out, storage)
        result = SparseTensor(entry.in_coords, out.astype(storage),
                              stride=entry.in_stride, boundary=entry.in_boundary,
                              batch_size=t.batch_size)
    return result


def pointwise_apply(t: SparseTensor, op: str, *, bias=None, scale=None,
                    shift=None) -> SparseTensor:
    """Elementwise feature transform; coordinates untouched.

    ``op`` is "relu", "bias_add", or "bn_fold" (pre-folded scale and shift,
    equivalent to eval-mode batchnorm).
    """
    storage = t.features.dtype
    if op == "relu":
        return t.replace_features(np.maximum(t.features, 0))
    if op == "bias_add":
        bias = np.asarray(bias, dtype=np.float32)
        if bias.shape != (t.num_channels,):
            raise ValueError("bias length must match the channel count")
        return t.replace_features((t.features.astype(np.float32) + bias).astype(storage))
    if op == "bn_fold":
        scale = np.asarray(scale, dtype=np.float32)
        shift = np.asarray(shift, dtype=np.float32)
        if scale.shape != (t.num_channels,) or shift.shape != (t.num_channels,):
            raise ValueError("scale/shift length must match the channel count")
        out = t.features.astype(np.float32) * scale + shift
        return t.replace_features(out.astype(storage))
    raise ValueError(f"unknown pointwise op {op!r}")
