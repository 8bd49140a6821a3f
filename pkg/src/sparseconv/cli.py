"""Command-line front end.

Commands: ``synth`` (generate point clouds), ``validate`` (engine vs. dense
oracle), ``tune`` (per-layer strategy search), ``bench`` (timed forwards with
a per-stage breakdown), ``run`` (single forward, dump the output tensor).

Exit codes: 0 success, 1 validation failure, 2 configuration error, 3 I/O
error.  ``--threads`` (or the SPARSECONV_THREADS env var) caps BLAS
parallelism; it never changes numerical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_IO = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


class InputDataError(Exception):
    """A point file or cloud could not be turned into a usable tensor."""


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        env = os.environ.get("SPARSECONV_THREADS")
        if not env:
            return
        threads = int(env)
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def _add_input_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", help="point file (SPCL binary or whitespace text)")
    parser.add_argument("--synth", type=int, metavar="N",
                        help="generate N synthetic points instead of reading a file")
    parser.add_argument("--kind", default="uniform",
                        choices=("uniform", "gaussian_clusters", "lidar_rings"))
    parser.add_argument("--extent", type=float, default=20.0,
                        help="synthetic box edge length (default 20)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--channels", type=int, default=4,
                        help="synthetic feature channels (default 4)")
    parser.add_argument("--voxel-size", type=float, default=1.0)


def _load_tensor(args):
    from .core import voxelize
    from .pointio import load_points
    from .synth import synth_points

    if args.synth is not None:
        points = synth_points(args.kind, args.synth, args.extent, args.seed,
                              args.channels)
        dims = 3
    elif args.input:
        try:
            points, dims = load_points(args.input)
        except ValueError as exc:
            raise InputDataError(str(exc)) from exc
    else:
        raise ValueError("either --input or --synth is required")
    try:
        return voxelize(points, args.voxel_size, spatial_dims=dims)
    except ValueError as exc:
        raise InputDataError(str(exc)) from exc


def _load_network(args):
    from .network import Network, load_network_config

    config = load_network_config(args.network)
    if getattr(args, "precision", None):
        from dataclasses import replace

        from .core import PrecisionMode
        config = replace(config, precision=PrecisionMode(args.precision))
    return config, Network.build(config)


def _cmd_synth(args) -> int:
    from .synth import synth_to_file

    points = synth_to_file(args.out, args.kind, args.n, args.extent, args.seed,
                           args.channels)
    print(f"wrote {points.shape[0]} points ({args.kind}, extent {args.extent}, "
          f"seed {args.seed}) to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .execution import ExecOptions
    from .oracle import compare, run_network_reference

    config, net = _load_network(args)
    t = _load_tensor(args)
    engine_out = net.forward(t, options=ExecOptions(order=args.order, fused=True))
    grid, active, _, _ = run_network_reference(net.describe(), t)
    report = compare(engine_out, grid, args.tolerance, active=active)
    print(f"network {config.name}: {t.num_points} input voxels, "
          f"{engine_out.num_points} output voxels")
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _parse_space(text: str):
    """Parse "eps=0,0.1;S=0,4096,inf" into a SearchSpace."""
    from .autotune import SearchSpace

    eps = None
    thresholds = None
    for part in text.split(";"):
        key, _, value = part.partition("=")
        values = []
        for item in value.split(","):
            item = item.strip()
            values.append(float("inf") if item == "inf" else float(item))
        if key.strip() == "eps":
            eps = tuple(values)
        elif key.strip() in ("S", "threshold"):
            thresholds = tuple(values)
        else:
            raise ValueError(f"unknown search-space key {key!r}")
    kwargs = {}
    if eps is not None:
        kwargs["eps_values"] = eps
    if thresholds is not None:
        kwargs["threshold_values"] = thresholds
    return SearchSpace(**kwargs)


def _cmd_tune(args) -> int:
    import time

    from .autotune import (
        LayerRecord,
        LayerWorkload,
        SearchSpace,
        StrategyFile,
        save_strategy,
        tune_index_kind,
        tune_layer,
    )
    from .core import voxelize
    from .execution import ExecOptions
    from .synth import synth_points

    config, net = _load_network(args)
    space = _parse_space(args.space) if args.space else SearchSpace()
    if args.budget:
        from dataclasses import replace
        space = replace(space, sample_budget=args.budget)

    t0 = time.perf_counter()
    samples = []
    if args.samples:
        from pathlib import Path

        from .pointio import load_points
        files = sorted(p for p in Path(args.samples).iterdir() if p.is_file())
        if not files:
            raise ValueError(f"no point files in {args.samples}")
        for path in files:
            points, dims = load_points(path)
            samples.append(voxelize(points, args.voxel_size, spatial_dims=dims))
    if args.input:
        from .pointio import load_points
        points, dims = load_points(args.input)
        samples.append(voxelize(points, args.voxel_size, spatial_dims=dims))
    n_synth = args.synth if args.synth is not None else (0 if samples else space.sample_budget)
    for i in range(n_synth):
        points = synth_points(args.kind, max(args.points_per_sample, 1),
                              args.extent, args.seed + i, args.channels)
        samples.append(voxelize(points, args.voxel_size))
    samples = samples[: space.sample_budget]
    if not samples:
        raise ValueError("no tuning samples; pass --synth or --input")

    by_layer: dict[str, list[dict]] = {}
    for t in samples:
        log: list = []
        net.forward(t, options=ExecOptions(workload_log=log))
        for rec in log:
            by_layer.setdefault(rec["layer"], []).append(rec)

    kinds = {layer.layer_id: layer.kind for layer in config.layers}
    ksizes = {layer.layer_id: layer.kernel_size for layer in config.layers}
    records = []
    for layer_id in config.conv_layer_ids:
        recs = by_layer.get(layer_id, [])
        if not recs:
            raise ValueError(f"no workloads recorded for layer {layer_id!r}")
        result = tune_layer([LayerWorkload.from_record(r) for r in recs], space)
        if kinds[layer_id] == "conv" and ksizes[layer_id] > 1:
            index = tune_index_kind(recs)
            index_kind = index.kind
            index_note = (f"grid {index.grid_seconds:.6f}s / hash {index.hash_seconds:.6f}s"
                          if not index.forced else "hash forced (grid over cell cap)")
        else:
            index_kind = "auto"
            index_note = "no coordinate index on this layer"
        records.append(LayerRecord(layer_id, result.eps, result.threshold, index_kind))
        thr = "inf" if result.threshold == float("inf") else f"{result.threshold:g}"
        print(f"{layer_id}: eps={result.eps:g} S={thr} index={index_kind} "
              f"({result.configurations} configs, {result.elapsed_seconds:.2f}s; {index_note})")

    strategy = StrategyFile(tuple(records), dataset=args.dataset_tag,
                            hardware=args.hardware_tag)
    save_strategy(args.out, strategy)
    total = time.perf_counter() - t0
    print(f"tuned {len(records)} layers over {len(samples)} samples in {total:.2f}s "
          f"-> {args.out}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    import json
    import warnings

    from .autotune import load_strategy
    from .bench import run_benchmark
    from .execution import ExecOptions
    from .network import ConfigError

    config, net = _load_network(args)
    t = _load_tensor(args)
    strategies = None
    strategy_line = "strategy: none (separate execution)"
    if args.strategy:
        try:
            loaded = load_strategy(args.strategy)
            strategies = net.strategies_from_file(loaded)
            strategy_line = (f"strategy: {args.strategy} (dataset={loaded.dataset!r}, "
                             f"hardware={loaded.hardware!r}, engine={loaded.engine})")
        except (ConfigError, ValueError) as exc:
            warnings.warn(f"strategy file rejected ({exc}); using separate execution")
    else:
        warnings.warn("no strategy file; using separate execution for every layer")

    options = ExecOptions(order=args.order, fused=args.fused == "on")
    result = run_benchmark(net, t, strategies, repeats=args.repeat,
                           warmups=args.warmup, options=options)

    print(f"network {config.name} ({config.precision.value}), "
          f"{t.num_points} input voxels, order={options.order} fused={options.fused}, "
          f"repeats={args.repeat} warmups={args.warmup}")
    print(strategy_line)
    breakdown = result.breakdown
    for layer in breakdown.layers():
        parts = []
        for stage in ("mapping", "gather", "matmul", "scatter", "other"):
            if (layer, stage) in breakdown.samples:
                parts.append(f"{stage} {breakdown.metrics(layer, stage)['median_s'] * 1e3:.3f}ms")
        print(f"  {layer}: " + ", ".join(parts))
    shares = breakdown.stage_shares()
    print("stage shares: " + ", ".join(
        f"{stage} {share:.1%}" for stage, share in sorted(shares.items())))
    for layer, report in result.traffic:
        print(f"  traffic {layer}: map_rows={report.map_rows} reuse={report.reuse_factor:.2f} "
              f"gather_read={report.gather_read} scatter_write={report.scatter_write} "
              f"bytes={report.total_bytes}")

    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(breakdown.to_csv())
        print(f"wrote breakdown CSV to {args.csv}")
    if args.json:
        doc = {layer: report.as_dict() for layer, report in result.traffic}
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        print(f"wrote traffic JSON to {args.json}")
    return EXIT_OK


def _cmd_run(args) -> int:
    import warnings

    import numpy as np

    from .autotune import load_strategy
    from .execution import ExecOptions
    from .network import ConfigError
    from .pointio import write_point_file

    config, net = _load_network(args)
    t = _load_tensor(args)
    strategies = None
    if args.strategy:
        try:
            strategies = net.strategies_from_file(load_strategy(args.strategy))
        except (ConfigError, ValueError) as exc:
            warnings.warn(f"strategy file rejected ({exc}); using separate execution")
    out = net.forward(t, strategies, ExecOptions(order=args.order))
    rows = np.concatenate(
        [out.coords[:, 1:].astype(np.float32), out.features.astype(np.float32)], axis=1)
    write_point_file(args.out, rows, spatial_dims=out.spatial_dims)
    print(f"network {config.name}: {t.num_points} -> {out.num_points} voxels "
          f"(stride {out.stride}); wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseconv",
        description="CPU sparse-convolution inference engine for voxelized point clouds",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (default: SPARSECONV_THREADS or machine)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic point cloud file")
    p.add_argument("--kind", default="uniform",
                   choices=("uniform", "gaussian_clusters", "lidar_rings"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--extent", type=float, default=100.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="check the engine against the dense oracle")
    p.add_argument("--network", required=True, help="config path or builtin name")
    _add_input_args(p)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--order", default="locality", choices=("locality", "weight"))
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("tune", help="search per-layer strategies, write a strategy file")
    p.add_argument("--network", required=True)
    _add_input_args(p)
    p.add_argument("--samples", help="directory of point files to tune on")
    p.add_argument("--points-per-sample", type=int, default=2000)
    p.add_argument("--space", help='search space, e.g. "eps=0,0.1;S=0,4096,inf"')
    p.add_argument("--budget", type=int, help="max workload samples (default 100)")
    p.add_argument("--dataset-tag", default="synthetic")
    p.add_argument("--hardware-tag", default="cpu")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("bench", help="timed forwards with per-stage breakdown")
    p.add_argument("--network", required=True)
    _add_input_args(p)
    p.add_argument("--strategy", help="strategy file from `tune`")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--precision", choices=("fp32", "fp16"))
    p.add_argument("--order", default="locality", choices=("locality", "weight"))
    p.add_argument("--fused", default="on", choices=("on", "off"))
    p.add_argument("--csv", help="write the latency breakdown CSV here")
    p.add_argument("--json", help="write per-layer traffic reports here")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("run", help="single forward pass, dump the output tensor")
    p.add_argument("--network", required=True)
    _add_input_args(p)
    p.add_argument("--strategy")
    p.add_argument("--precision", choices=("fp32", "fp16"))
    p.add_argument("--order", default="locality", choices=("locality", "weight"))
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except (InputDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        from .network import ConfigError

        if isinstance(exc, (ConfigError, ValueError, KeyError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
