"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.
"""

import numpy as np
import pytest

from sparseconv.autotune import ExecutionCostModel, LayerWorkload, SearchSpace, tune_layer
from sparseconv.bench import run_benchmark
from sparseconv.core import PrecisionMode, WeightTensor, voxelize
from sparseconv.execution import (
    ExecOptions,
    GroupingStrategy,
    LayerSpec,
    MatmulGroup,
    build_grouping,
    execute_groups,
    partition_groups,
    schedule_for,
    sparse_conv_forward,
)
from sparseconv.mapping import (
    KernelOffsets,
    build_gather_scatter_plan,
    build_index,
    compute_output_coords,
    downsample_boundary,
    enumerate_offsets,
    map_search,
)
from sparseconv.network import Network, load_builtin_config
from sparseconv.oracle import (
    compare,
    dense_conv_reference,
    dense_grid,
    downsample_coords_reference,
    map_search_bruteforce,
)
from sparseconv.synth import synth_points
from sparseconv.traffic import (
    CacheModel,
    count_traffic,
    footprint_bytes,
    model_transactions,
    movement_trace,
    simulate_cache,
    theoretical_totals,
)

from conftest import random_coords, random_tensor


def done(number, name):
    print(f"ACCEPTANCE {number:02d} {name}: PASS", flush=True)


def coord_set(coords):
    return {tuple(row) for row in np.asarray(coords).tolist()}


def pair_set(pairs):
    return {tuple(row) for row in np.asarray(pairs).tolist()}


def test_c01_worked_coordinate_example():
    # input (3, 5), stride 2: offset (1, 1) yields (1, 2); offset (0, 0) none
    in_coords = np.array([[0, 3, 5]])
    out_boundary = (2, 3)
    only_11 = KernelOffsets(np.array([[1, 1]]), 1, 2)
    only_00 = KernelOffsets(np.array([[0, 0]]), 1, 2)
    got_11 = compute_output_coords(in_coords, only_11, 2, out_boundary)
    got_00 = compute_output_coords(in_coords, only_00, 2, out_boundary)
    assert coord_set(got_11) == {(0, 1, 2)}
    assert got_00.shape[0] == 0
    # and through the full K=2 window both facts hold at once
    full = compute_output_coords(in_coords, enumerate_offsets(2, 2), 2, out_boundary)
    assert coord_set(full) == {(0, 1, 2)}
    done(1, "worked coordinate example")


@pytest.mark.parametrize("kernel_size,stride", [(2, 1), (2, 2), (3, 1), (3, 2)])
@pytest.mark.parametrize("channels", [4, 16])
def test_c02_dense_oracle_equivalence(kernel_size, stride, channels):
    for seed in range(200):
        rng = np.random.default_rng(seed)
        edge = 8 + seed % 9  # boundaries up to 16^3
        t = random_tensor(rng, (edge, edge, edge), 0.08, channels)
        w = WeightTensor(
            rng.normal(0, 1.0 / np.sqrt(kernel_size**3 * channels),
                       (kernel_size**3, channels, channels)).astype(np.float32),
            kernel_size, 3)
        spec = LayerSpec(kernel_size=kernel_size, stride=stride,
                         c_in=channels, c_out=channels)
        out = sparse_conv_forward(t, w, spec)
        grid = dense_grid(t.coords, t.features, t.boundary)
        if stride == 1:
            active, bout = t.coords, t.boundary
        else:
            bout = downsample_boundary(t.boundary, stride)
            active = downsample_coords_reference(t.coords, kernel_size, stride, bout)
        ref = dense_conv_reference(grid, np.asarray(w.weights), kernel_size,
                                   stride, active, bout)
        assert coord_set(out.coords) == coord_set(active)
        report = compare(out, ref, 1e-5, active=active)
        assert report.passed, f"seed {seed}: {report.summary()}"
    done(2, f"dense-oracle equivalence K={kernel_size} s={stride} C={channels}")


@pytest.mark.parametrize("kernel_size,stride", [(2, 1), (2, 2), (3, 1), (3, 2)])
def test_c03_map_search_matches_bruteforce(kernel_size, stride):
    boundary = (10, 10, 10)
    offsets = enumerate_offsets(3, kernel_size)
    for seed in range(50):
        coords = random_coords(np.random.default_rng(seed), boundary, 0.1)
        bout = boundary if stride == 1 else downsample_boundary(boundary, stride)
        out = compute_output_coords(coords, offsets, stride, bout)
        brute = map_search_bruteforce(coords, out, offsets, stride)
        for kind in ("grid", "hash"):
            index = build_index(coords, kind, boundary)
            kmap = map_search(index, out, offsets, stride)
            for n in range(offsets.volume):
                assert pair_set(kmap.pairs[n]) == pair_set(brute[n]), \
                    f"seed {seed} offset {n} kind {kind}"
    done(3, f"map search vs brute force K={kernel_size} s={stride}")


def test_c04_symmetry_theorem():
    boundary = (12, 12, 12)
    offsets = enumerate_offsets(3, 3)
    for seed in range(100):
        coords = random_coords(np.random.default_rng(seed), boundary, 0.1)
        index = build_index(coords, "grid", boundary)
        kmap = map_search(index, coords, offsets, 1, use_symmetry=False)
        sizes = kmap.sizes
        for n in range(27):
            assert sizes[n] == sizes[26 - n]
            assert pair_set(kmap.pairs[26 - n]) == \
                {(k, j) for j, k in kmap.pairs[n].tolist()}
    done(4, "submanifold map symmetry")


def test_c05_grouping_special_cases():
    sizes = np.zeros(27, dtype=np.int64)
    for i in range(13):
        sizes[i] = sizes[26 - i] = 400 - 10 * i
    schedule, symmetric = schedule_for(enumerate_offsets(3, 3), 1)
    assert schedule == list(range(13)) and symmetric

    dense = build_grouping(sizes, 1.0, float("inf"), schedule, symmetric)
    padded = sum(2 * (400 - int(sizes[i])) for i in range(13))
    assert dense == GroupingStrategy(
        1.0, float("inf"), tuple(range(13)),
        (MatmulGroup(0, 13, "batched", padded),), True, 27)

    separate = build_grouping(sizes, 0.0, 0.0, schedule, symmetric)
    assert separate == GroupingStrategy(
        0.0, 0.0, tuple(range(13)),
        tuple(MatmulGroup(i, i + 1, "sequential", 0) for i in range(13)), True, 27)

    paired = build_grouping(sizes, 0.0, float("inf"), schedule, symmetric)
    assert paired == GroupingStrategy(
        0.0, float("inf"), tuple(range(13)),
        tuple(MatmulGroup(i, i + 1, "batched", 0) for i in range(13)), True, 27)
    assert all(len(paired.members(g)) == 2 for g in paired.groups)
    done(5, "grouping special cases")


def test_c06_grouping_invariant_fuzzed():
    thresholds = [0.0, 64.0, 512.0, 4096.0, float("inf")]
    for case in range(10_000):
        rng = np.random.default_rng(case)
        sizes = rng.integers(0, 10_000, size=rng.integers(1, 40))
        eps = float(rng.uniform(0.0, 1.0))
        threshold = thresholds[case % len(thresholds)]
        strategy = build_grouping(sizes, eps, threshold)
        strategy.validate(sizes)
        for group in strategy.groups:
            chunk = sizes[list(strategy.members(group))]
            hi = chunk.max() if chunk.size else 0
            if group.mode == "batched" and hi > 0:
                assert 1.0 - chunk.min() / hi <= eps + 1e-12
                # padded FLOPs overhead is bounded by eps
                assert group.padded_rows <= eps * len(chunk) * hi + 1e-9

    for case in range(200):
        rng = np.random.default_rng(10_000 + case)
        sizes = rng.integers(0, 60, size=8)
        buffer = rng.standard_normal((int(sizes.sum()), 4)).astype(np.float32)
        weights = rng.standard_normal((8, 4, 4)).astype(np.float32)
        eps = float(rng.uniform(0.0, 1.0))
        threshold = float(rng.choice([0.0, 32.0, float("inf")]))
        grouped = execute_groups(buffer, weights,
                                 build_grouping(sizes, eps, threshold), sizes)
        separate = execute_groups(buffer, weights,
                                  build_grouping(sizes, 0.0, 0.0), sizes)
        scale = max(float(np.abs(separate).max()), 1e-6)
        assert np.abs(grouped - separate).max() / scale <= 1e-4
    done(6, "grouping invariant on fuzzed sizes")


def test_c07_hand_traced_partition():
    assert partition_groups([100, 95, 90, 50, 48], 0.1, range(5)) == [(0, 3), (3, 5)]
    done(7, "hand-traced partition")


def test_c08_traffic_model():
    coords = np.array([[0, x, y, z] for x in range(8) for y in range(8)
                       for z in range(8)])
    offsets = enumerate_offsets(3, 3)
    index = build_index(coords, "grid", (8, 8, 8))
    kmap = map_search(index, coords, offsets, 1)
    assert kmap.total == 10648
    report = theoretical_totals(kmap, 512, 512, 6, 6)
    assert report.reuse_factor == 10648 / 512

    for seed in range(50):
        rng = np.random.default_rng(seed)
        edge = int(rng.integers(5, 12))
        coords = random_coords(rng, (edge, edge, edge), float(rng.uniform(0.05, 0.4)))
        k = int(rng.choice([2, 3]))
        off = enumerate_offsets(3, k)
        index = build_index(coords, "grid", (edge, edge, edge))
        kmap = map_search(index, coords, off, 1, use_symmetry=False)
        plan = build_gather_scatter_plan(kmap)
        c_in, c_out = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        loc = count_traffic(plan, "locality_aware", c_in, c_out)
        ws = count_traffic(plan, "weight_stationary", c_in, c_out)
        assert loc.gather_read == plan.n_in * c_in                    # exactly
        assert ws.n1 == plan.total * (c_in + c_out)                   # always
        assert ws.gather_read + ws.scatter_write == ws.n1
    done(8, "traffic model totals")


def test_c09_transaction_model():
    fp32 = model_transactions(32, "scalar_fp32")
    fp16 = model_transactions(32, "scalar_fp16")
    assert fp32 == fp32.__class__(1, 1.0)
    assert fp16.transactions == fp32.transactions and fp16.utilization == 0.5
    for n in [1, 17, 32, 33, 64, 100, 4096, 99999]:
        s32 = model_transactions(n, "scalar_fp32")
        s16 = model_transactions(n, "scalar_fp16")
        v16 = model_transactions(n, "vector_fp16")
        assert s16.transactions == s32.transactions
        assert v16.transactions == -(-s32.transactions // 2)
    assert model_transactions(64, "vector_fp16").utilization == 1.0
    done(9, "transaction model")


def test_c10_fused_downsampling_matches_pipeline():
    boundary = (12, 12, 12)
    for seed in range(100):
        kernel_size = 2 if seed % 2 == 0 else 3
        coords = random_coords(np.random.default_rng(seed), boundary, 0.15)
        offsets = enumerate_offsets(3, kernel_size)
        bout = downsample_boundary(boundary, 2)
        fused = compute_output_coords(coords, offsets, 2, bout)
        staged = downsample_coords_reference(coords, kernel_size, 2, bout)
        assert coord_set(fused) == coord_set(staged)
        np.testing.assert_array_equal(fused, staged)  # same canonical order too
    done(10, "fused downsampling equals staged pipeline")


def make_bimodal_workload(seed, volume=27, c=8, big=1200, small=60):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(small // 2, small, size=volume).astype(np.int64)
    heavy = rng.choice(volume // 2, size=4, replace=False)
    sizes[heavy] = rng.integers(big // 2, big, size=4)
    sizes = np.minimum(sizes, sizes[::-1])
    sizes[volume // 2] = 0  # center handled without data movement
    return LayerWorkload(sizes, list(range(volume // 2)), True, c, c)


def test_c11_autotuner():
    workloads = [make_bimodal_workload(seed) for seed in range(100)]
    space = SearchSpace()
    assert space.configurations <= 1000
    model = ExecutionCostModel(workloads, repeats=3, warmups=1)
    result = tune_layer(workloads, space, cost_fn=model)
    assert result.configurations == space.configurations
    assert result.elapsed_seconds < 600.0  # well under ten minutes

    # re-measure the winner against the two fixed strategies
    check = ExecutionCostModel(workloads, repeats=7, warmups=2, seed=1)
    tuned = check(result.eps, result.threshold)
    separate = check(0.0, 0.0)
    symmetric = check(0.0, float("inf"))
    baseline = min(separate, symmetric)
    assert tuned <= 1.05 * baseline, \
        f"tuned {tuned:.4f}s vs separate {separate:.4f}s / symmetric {symmetric:.4f}s"
    print(f"  tuned (eps={result.eps:g}, S={result.threshold:g}) {tuned * 1e3:.2f}ms vs "
          f"separate {separate * 1e3:.2f}ms, symmetric {symmetric * 1e3:.2f}ms "
          f"(search {result.elapsed_seconds:.1f}s)")
    done(11, "autotuner beats fixed baselines")


def test_c12_locality_benefit():
    net = Network.build(load_builtin_config("minkunet_toy"))
    t = voxelize(synth_points("uniform", 2500, 14.0, seed=11), 1.0)

    # counted source reads: exact per-layer ratio, strictly fewer in total
    ws_log, loc_log, plans = [], [], []
    net.forward(t, options=ExecOptions(order="weight", fused=False,
                                       traffic_log=ws_log))
    net.forward(t, options=ExecOptions(order="locality", fused=True,
                                       traffic_log=loc_log, plan_log=plans))
    assert [l for l, _ in ws_log] == [l for l, _ in loc_log]
    for (layer, ws), (_, loc) in zip(ws_log, loc_log):
        assert ws.gather_read == ws.map_rows * ws.c_in
        assert loc.gather_read == loc.n_in * loc.c_in
        assert loc.gather_read <= ws.gather_read
    total_ws = sum(r.gather_read for _, r in ws_log)
    total_loc = sum(r.gather_read for _, r in loc_log)
    assert total_loc < total_ws

    # LRU simulation at capacity = footprint / 8: fused locality misses less
    for layer, plan in plans:
        if plan.total == 0:
            continue
        c_in = dict(loc_log)[layer].c_in
        c_out = dict(loc_log)[layer].c_out
        cache = CacheModel(max(footprint_bytes(plan, c_in, c_out) // 8, 64))
        interleaved = simulate_cache(
            movement_trace(plan, "weight_interleaved", c_in, c_out), cache)
        fused = simulate_cache(
            movement_trace(plan, "locality_fused", c_in, c_out), cache)
        assert fused < interleaved, f"{layer}: fused {fused} vs interleaved {interleaved}"

    # measured gather/scatter wall-clock must not regress
    big = voxelize(synth_points("uniform", 20_000, 28.0, seed=12), 1.0)
    ws_bench = run_benchmark(net, big, None, repeats=7, warmups=2,
                             options=ExecOptions(order="weight", fused=False))
    loc_bench = run_benchmark(net, big, None, repeats=7, warmups=2,
                              options=ExecOptions(order="locality", fused=True))

    def movement_seconds(result):
        totals = result.breakdown.stage_totals()
        return totals.get("gather", 0.0) + totals.get("scatter", 0.0)

    speedup = movement_seconds(ws_bench) / movement_seconds(loc_bench)
    assert speedup >= 1.0, f"locality movement regressed: {speedup:.2f}x"
    print(f"  locality gather/scatter speedup over weight-stationary: {speedup:.2f}x")
    done(12, "locality-aware movement benefit")


def test_c13_fp16_path():
    from dataclasses import replace
    config32 = load_builtin_config("minkunet_toy")
    config16 = replace(config32, precision=PrecisionMode.FP16_STORAGE)
    t = voxelize(synth_points("uniform", 2500, 15.0, seed=21), 1.0)
    out32 = Network.build(config32).forward(t)
    out16 = Network.build(config16).forward(t)
    np.testing.assert_array_equal(out16.coords, out32.coords)
    rel = np.abs(out16.features.astype(np.float32) - out32.features).max() \
        / np.abs(out32.features).max()
    assert rel <= 1e-2, f"fp16 relative error {rel:.4f}"
    done(13, "fp16 storage path")
