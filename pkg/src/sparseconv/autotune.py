"""Per-layer strategy search: grid search over the grouping parameters,
index-backend selection, and strategy persistence.

The search is inference-only and runs once per layer on a small sample of
workloads; the chosen parameters are then applied unchanged at inference
time.  A deterministic analytic cost model is available so the search loop
itself can be unit-tested without touching the clock.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from statistics import median

import numpy as np

from .execution import build_grouping, execute_groups
from .mapping import (
    DEFAULT_GRID_CELL_CAP,
    GridCapacityError,
    build_index,
    enumerate_offsets,
    map_search,
)
from .version import __version__

DEFAULT_EPS_VALUES = tuple(round(0.05 * i, 2) for i in range(21))          # 0.0 .. 1.0
DEFAULT_THRESHOLDS = (0.0,) + tuple(float(2**p) for p in range(6, 21)) + (float("inf"),)


@dataclass(frozen=True)
class SearchSpace:
    """Candidate grids for the grouping parameters."""

    eps_values: tuple[float, ...] = DEFAULT_EPS_VALUES
    threshold_values: tuple[float, ...] = DEFAULT_THRESHOLDS
    sample_budget: int = 100

    def __post_init__(self):
        if not self.eps_values or not self.threshold_values:
            raise ValueError("search space must not be empty")
        if len(self.eps_values) * len(self.threshold_values) > 1000:
            raise ValueError("search space larger than 1000 configurations")
        if self.sample_budget < 1:
            raise ValueError("sample budget must be positive")
        object.__setattr__(self, "eps_values", tuple(sorted(self.eps_values)))
        object.__setattr__(self, "threshold_values", tuple(sorted(self.threshold_values)))

    @property
    def configurations(self) -> int:
        return len(self.eps_values) * len(self.threshold_values)


@dataclass
class LayerWorkload:
    """One sampled workload of a layer: per-offset map sizes plus dims."""

    map_sizes: np.ndarray
    schedule: list[int]
    symmetric: bool
    c_in: int
    c_out: int

    @staticmethod
    def from_record(record: dict) -> "LayerWorkload":
        return LayerWorkload(
            map_sizes=np.asarray(record["map_sizes"], dtype=np.int64),
            schedule=list(record["schedule"]),
            symmetric=bool(record["symmetric"]),
            c_in=int(record["c_in"]),
            c_out=int(record["c_out"]),
        )


class ExecutionCostModel:
    """Wall-clock cost of grouped execution over a workload suite.

    Buffers and weights are materialized once (random, unit scale) and reused
    across configurations; each evaluation times one pass over the whole
    suite, taking the median of ``repeats`` passes after ``warmups``.
    """

    def __init__(self, workloads: list[LayerWorkload], repeats: int = 3,
                 warmups: int = 1, seed: int = 0):
        if repeats < 1:
            raise ValueError("need at least one timed repeat")
        self.repeats = repeats
        self.warmups = max(warmups, 1)
        rng = np.random.default_rng(seed)
        self._prepared = []
        for wl in workloads:
            total = int(wl.map_sizes.sum())
            buffer = rng.standard_normal((total, wl.c_in)).astype(np.float32)
            volume = wl.map_sizes.shape[0]
            weights = rng.standard_normal((volume, wl.c_in, wl.c_out)).astype(np.float32)
            weights /= np.sqrt(wl.c_in)
            self._prepared.append((wl, buffer, weights))

    def __call__(self, eps: float, threshold: float) -> float:
        samples = []
        for _ in range(self.warmups + self.repeats):
            t0 = time.perf_counter()
            for wl, buffer, weights in self._prepared:
                strategy = build_grouping(wl.map_sizes, eps, threshold,
                                          wl.schedule, wl.symmetric)
                execute_groups(buffer, weights, strategy, wl.map_sizes)
            samples.append(time.perf_counter() - t0)
        return median(samples[self.warmups:])


class AnalyticCostModel:
    """Deterministic stand-in for timing: padded FLOPs plus a fixed cost per
    matmul dispatch.  Only used to test the search loop reproducibly."""

    def __init__(self, workloads: list[LayerWorkload], dispatch_cost: float = 5e4):
        self.workloads = list(workloads)
        self.dispatch_cost = dispatch_cost

    def __call__(self, eps: float, threshold: float) -> float:
        total = 0.0
        for wl in self.workloads:
            strategy = build_grouping(wl.map_sizes, eps, threshold,
                                      wl.schedule, wl.symmetric)
            for group in strategy.groups:
                members = strategy.members(group)
                if group.mode == "batched":
                    n_max = max((int(wl.map_sizes[m]) for m in members), default=0)
                    total += self.dispatch_cost
                    total += len(members) * n_max * wl.c_in * wl.c_out
                else:
                    total += self.dispatch_cost * len(members)
                    total += sum(int(wl.map_sizes[m]) for m in members) * wl.c_in * wl.c_out
        return total


@dataclass(frozen=True)
class TuneResult:
    eps: float
    threshold: float
    cost: float
    configurations: int
    elapsed_seconds: float


def tune_layer(workloads: list[LayerWorkload], space: SearchSpace | None = None,
               cost_fn=None) -> TuneResult:
    """Exhaustive grid search for the cheapest grouping parameters.

    ``cost_fn(eps, threshold)`` returns the total cost over the sample suite;
    by default a fresh :class:`ExecutionCostModel` over ``workloads``.  Ties
    break toward smaller eps, then smaller threshold (the grids are sorted
    and only strict improvements move the argmin).
    """
    space = space or SearchSpace()
    if not workloads:
        raise ValueError("no workload samples to tune on")
    workloads = list(workloads)[: space.sample_budget]
    if cost_fn is None:
        cost_fn = ExecutionCostModel(workloads)
    best_cost = None
    best = (space.eps_values[0], space.threshold_values[0])
    count = 0
    t0 = time.perf_counter()
    for eps in space.eps_values:
        for threshold in space.threshold_values:
            cost = cost_fn(eps, threshold)
            count += 1
            if best_cost is None or cost < best_cost:
                best_cost = cost
                best = (eps, threshold)
    return TuneResult(best[0], best[1], float(best_cost), count,
                      time.perf_counter() - t0)


@dataclass(frozen=True)
class IndexDecision:
    kind: str
    grid_seconds: float | None
    hash_seconds: float | None
    forced: bool = False


def tune_index_kind(records: list[dict],
                    cell_cap: int = DEFAULT_GRID_CELL_CAP) -> IndexDecision:
    """Pick the faster coordinate-index backend for a layer.

    ``records`` are workload dicts carrying ``in_coords``, ``out_coords``,
    ``kernel_size``, ``stride``, ``boundary``, and ``batch_size``.  The grid
    backend wins ties (it is collision-free); if any sample's boundary blows
    the grid cell cap the hash backend is forced.
    """
    if not records:
        raise ValueError("no mapping workloads to time")

    def run(kind: str) -> list[float]:
        times = []
        for rec in records:
            offsets = enumerate_offsets(len(rec["boundary"]), rec["kernel_size"])
            t0 = time.perf_counter()
            index = build_index(rec["in_coords"], kind, rec["boundary"],
                                rec["batch_size"], cell_cap)
            map_search(index, rec["out_coords"], offsets, rec["stride"])
            times.append(time.perf_counter() - t0)
        return times

    try:
        run("grid")  # warmup
        grid_times = run("grid")
    except GridCapacityError:
        run("hash")
        hash_times = run("hash")
        return IndexDecision("hash", None, median(hash_times), forced=True)
    hash_times = run("hash")
    grid_med, hash_med = median(grid_times), median(hash_times)
    kind = "hash" if hash_med < grid_med else "grid"
    return IndexDecision(kind, grid_med, hash_med)


@dataclass(frozen=True)
class LayerRecord:
    layer_id: str
    eps: float
    threshold: float
    index_kind: str = "auto"


@dataclass(frozen=True)
class StrategyFile:
    """Per-layer tuned parameters plus provenance tags."""

    layers: tuple[LayerRecord, ...]
    dataset: str = ""
    hardware: str = ""
    engine: str = __version__
    version: int = 1

    def record_for(self, layer_id: str) -> LayerRecord | None:
        for rec in self.layers:
            if rec.layer_id == layer_id:
                return rec
        return None


FORMAT_VERSION = 1


def _encode_threshold(value: float):
    return "inf" if value == float("inf") else value


def _decode_threshold(value) -> float:
    if value == "inf":
        return float("inf")
    return float(value)


def save_strategy(path, strategy: StrategyFile) -> None:
    doc = {
        "version": strategy.version,
        "engine": strategy.engine,
        "dataset": strategy.dataset,
        "hardware": strategy.hardware,
        "layers": [
            {
                "id": rec.layer_id,
                "eps": rec.eps,
                "threshold": _encode_threshold(rec.threshold),
                "index_kind": rec.index_kind,
            }
            for rec in strategy.layers
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_strategy(path, expected_layers: int | None = None) -> StrategyFile:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed strategy file: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise ValueError(f"{path}: missing version field")
    if doc["version"] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported strategy version {doc['version']}")
    try:
        layers = tuple(
            LayerRecord(
                layer_id=str(rec["id"]),
                eps=float(rec["eps"]),
                threshold=_decode_threshold(rec["threshold"]),
                index_kind=str(rec.get("index_kind", "auto")),
            )
            for rec in doc["layers"]
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed layer record: {exc}") from exc
    if expected_layers is not None and len(layers) != expected_layers:
        raise ValueError(
            f"{path}: {len(layers)} layer records, expected {expected_layers}"
        )
    return StrategyFile(layers=layers, dataset=doc.get("dataset", ""),
                        hardware=doc.get("hardware", ""),
                        engine=doc.get("engine", ""), version=doc["version"])
