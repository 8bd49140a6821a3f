"""Benchmark harness: repeated timed forwards with a per-stage latency
breakdown and per-layer traffic reports.

CSV schema (frozen): one row per (layer, stage, metric) under the header
``layer,stage,metric,value``.  Metrics are ``median_s``, ``mean_s``,
``p10_s``, ``p90_s``, ``min_s`` over the timed repeats, in seconds.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .core import SparseTensor
from .execution import ExecOptions, StageTimer
from .network import Network

CSV_HEADER = ("layer", "stage", "metric", "value")
METRICS = ("median_s", "mean_s", "p10_s", "p90_s", "min_s")


@dataclass
class LatencyBreakdown:
    """Per-(layer, stage) wall-clock samples across the timed repeats."""

    repeats: int
    warmups: int
    samples: dict[tuple[str, str], list[float]] = field(default_factory=dict)

    def record_pass(self, timer: StageTimer) -> None:
        for key, value in timer.samples.items():
            self.samples.setdefault(key, []).append(value)

    def metrics(self, layer: str, stage: str) -> dict[str, float]:
        values = np.asarray(self.samples.get((layer, stage), [0.0]))
        return {
            "median_s": float(np.median(values)),
            "mean_s": float(values.mean()),
            "p10_s": float(np.percentile(values, 10)),
            "p90_s": float(np.percentile(values, 90)),
            "min_s": float(values.min()),
        }

    def layers(self) -> list[str]:
        seen: list[str] = []
        for layer, _ in self.samples:
            if layer not in seen:
                seen.append(layer)
        return seen

    def stage_totals(self) -> dict[str, float]:
        """Median per-stage seconds summed over layers."""
        totals: dict[str, float] = {}
        for (layer, stage) in self.samples:
            totals[stage] = totals.get(stage, 0.0) + self.metrics(layer, stage)["median_s"]
        return totals

    def stage_shares(self) -> dict[str, float]:
        """Fraction of the total median runtime spent per stage."""
        totals = self.stage_totals()
        grand = sum(totals.values())
        if grand <= 0:
            return {stage: 0.0 for stage in totals}
        return {stage: t / grand for stage, t in totals.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(CSV_HEADER)
        for (layer, stage) in sorted(self.samples):
            for metric, value in self.metrics(layer, stage).items():
                writer.writerow([layer, stage, metric, f"{value:.9f}"])
        return buf.getvalue()


@dataclass
class BenchResult:
    breakdown: LatencyBreakdown
    traffic: list  # (layer, TrafficReport) from the final timed pass
    output: SparseTensor


def run_benchmark(network: Network, t: SparseTensor, strategies=None,
                  repeats: int = 3, warmups: int = 1,
                  options: ExecOptions | None = None) -> BenchResult:
    """Forward the network ``warmups + repeats`` times, timing each stage."""
    if repeats < 1:
        raise ValueError("need at least one timed repeat")
    base = options or ExecOptions()
    breakdown = LatencyBreakdown(repeats=repeats, warmups=warmups)
    output = None
    traffic_log: list = []
    for i in range(warmups + repeats):
        timer = StageTimer()
        traffic_log = []
        opts = replace(base, timer=timer, traffic_log=traffic_log)
        output = network.forward(t, strategies, opts)
        if i >= warmups:
            breakdown.record_pass(timer)
    return BenchResult(breakdown, traffic_log, output)
