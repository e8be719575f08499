"""Benchmark harness: timed sweeps with MAC and allocation instrumentation.

Every row in a sweep is a full forward pass on seeded data. Timing runs
repeat the pass with instrumentation disabled; one extra untimed pass
collects the multiply-accumulate count and the peak logical bytes of the
forward-phase working set. Routing and grouping are computed once outside
the timed region since both the fused and padded pipelines consume the same
routing result.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .accounting import AllocationLedger
from .core_tensor import Matrix, matmul, seeded_random_matrix
from .kernels import TileConfig, add_macs, mac_count, reset_mac_count
from .moe_layers import (
    MomhaConfig,
    SmoeMlpConfig,
    apply_activation,
    init_momha_weights,
    init_smoe_mlp_weights,
    momha_forward,
    smoe_mlp_forward,
)
from .oracle import (
    BaselineConfig,
    baseline_grouped_pipeline,
    baseline_momha_pipeline,
)
from .router import compute_grouped_order, gate_forward, topk_select

CSV_HEADER = "mode,k,E,d_model,d_expert,T,median_ns,p5_ns,p95_ns,macs,peak_bytes,tokens_per_s"


@dataclass(frozen=True)
class BenchRecord:
    """One benchmark row: a configuration plus its measured columns."""

    mode: str
    k: int
    num_experts: int
    d_model: int
    d_expert: int
    tokens: int
    median_ns: int
    p5_ns: int
    p95_ns: int
    macs: int
    peak_bytes: int
    tokens_per_s: float

    def to_csv_row(self) -> str:
        return (
            f"{self.mode},{self.k},{self.num_experts},{self.d_model},"
            f"{self.d_expert},{self.tokens},{self.median_ns},{self.p5_ns},"
            f"{self.p95_ns},{self.macs},{self.peak_bytes},{self.tokens_per_s:.6g}"
        )


def write_csv(records: list[BenchRecord], path: str) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for rec in records:
            fh.write(rec.to_csv_row() + "\n")


def format_table(records: list[BenchRecord]) -> str:
    rows = [CSV_HEADER.split(",")] + [r.to_csv_row().split(",") for r in records]
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows
    )


def _percentile(sorted_ns: list[int], frac: float) -> int:
    return sorted_ns[int(round(frac * (len(sorted_ns) - 1)))]


def time_callable(fn, warmup: int, repeats: int) -> tuple[int, int, int]:
    """Median / 5th / 95th percentile wall time of fn() in nanoseconds."""
    for _ in range(max(warmup, 0)):
        fn()
    samples = []
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    samples.sort()
    return (
        int(statistics.median(samples)),
        _percentile(samples, 0.05),
        _percentile(samples, 0.95),
    )


def _measure(run, instrumented, *, mode, k, num_experts, d_model, d_expert,
             tokens, warmup, repeats) -> BenchRecord:
    """Time `run`; call `instrumented(ledger)` once for macs and peak bytes."""
    reset_mac_count()
    ledger = AllocationLedger()
    instrumented(ledger)
    macs = mac_count()
    peak = ledger.peak_bytes("forward")
    median_ns, p5_ns, p95_ns = time_callable(run, warmup, repeats)
    return BenchRecord(
        mode=mode, k=k, num_experts=num_experts, d_model=d_model,
        d_expert=d_expert, tokens=tokens, median_ns=median_ns, p5_ns=p5_ns,
        p95_ns=p95_ns, macs=macs, peak_bytes=peak,
        tokens_per_s=tokens / (median_ns * 1e-9),
    )


def _mlp_problem(d_model: int, d_expert: int, num_experts: int, k: int,
                 tokens: int, seed: int):
    config = SmoeMlpConfig(d_model=d_model, d_expert=d_expert,
                           num_experts=num_experts, k=k)
    x = seeded_random_matrix(tokens, d_model, seed, scale=1.0)
    w1, w2 = init_smoe_mlp_weights(config, seed + 101)
    wg = seeded_random_matrix(d_model, num_experts, seed + 7,
                              scale=1.0 / math.sqrt(d_model))
    routing = topk_select(gate_forward(x, wg), k)
    order = compute_grouped_order(routing)
    return config, x, w1, w2, routing, order


def bench_smoe_mlp(
    d_model: int,
    d_expert: int,
    num_experts: int,
    k: int,
    tokens: int,
    *,
    mode: str = "fused",
    seed: int = 0,
    repeats: int = 100,
    warmup: int = 10,
    tile: TileConfig | None = None,
    block_size: int = 128,
) -> BenchRecord:
    """One expert-MLP row; mode is "fused" or "baseline" (padded copies)."""
    config, x, w1, w2, routing, order = _mlp_problem(
        d_model, d_expert, num_experts, k, tokens, seed)
    if mode == "fused":
        def run(ledger=None):
            smoe_mlp_forward(x, w1, w2, routing, order, training=False,
                             tile=tile, ledger=ledger)
    elif mode == "baseline":
        baseline = BaselineConfig(block_size=block_size)

        def run(ledger=None):
            baseline_grouped_pipeline(x, w1, w2, routing, order, baseline,
                                      ledger=ledger)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _measure(
        run, lambda ledger: run(ledger=ledger), mode=mode, k=k,
        num_experts=num_experts, d_model=d_model, d_expert=d_expert,
        tokens=tokens, warmup=warmup, repeats=repeats,
    )


def bench_dense_mlp(
    d_model: int,
    d_ff: int,
    tokens: int,
    *,
    seed: int = 0,
    repeats: int = 100,
    warmup: int = 10,
    activation: str = "gelu",
) -> BenchRecord:
    """Unrouted two-matmul MLP comparator; reported with k=1, E=1."""
    x = seeded_random_matrix(tokens, d_model, seed, scale=1.0)
    w1 = seeded_random_matrix(d_model, d_ff, seed + 101,
                              scale=1.0 / math.sqrt(d_model))
    w2 = seeded_random_matrix(d_ff, d_model, seed + 102,
                              scale=1.0 / math.sqrt(d_ff))

    def run(ledger=None):
        h = matmul(x, w1)
        if ledger:
            ledger.alloc("dense.hidden", tokens, d_ff, "forward")
        h.data[:] = apply_activation(h.data, activation)
        y = matmul(h, w2)
        if ledger:
            ledger.alloc("dense.y", tokens, d_model, "forward")
            add_macs(tokens * d_model * d_ff + tokens * d_ff * d_model)
        return y

    return _measure(
        run, lambda ledger: run(ledger=ledger), mode="dense", k=1,
        num_experts=1, d_model=d_model, d_expert=d_ff, tokens=tokens,
        warmup=warmup, repeats=repeats,
    )


def _momha_problem(d_model: int, d_head: int, num_heads: int, k: int,
                   num_experts: int, tokens: int, seq_len: int, seed: int):
    config = MomhaConfig(d_model=d_model, d_head=d_head, num_heads=num_heads,
                         heads_per_expert=num_heads // k,
                         num_experts=num_experts, k=k)
    x = seeded_random_matrix(tokens, d_model, seed, scale=1.0)
    weights = init_momha_weights(config, seed + 101)
    wg = seeded_random_matrix(d_model, num_experts, seed + 7,
                              scale=1.0 / math.sqrt(d_model))
    routing = topk_select(gate_forward(x, wg), k)
    order = compute_grouped_order(routing)
    return config, x, weights, routing, order


def bench_momha(
    d_model: int,
    d_head: int,
    num_heads: int,
    k: int,
    num_experts: int,
    tokens: int,
    seq_len: int,
    *,
    mode: str = "fused",
    seed: int = 0,
    repeats: int = 100,
    warmup: int = 10,
    tile: TileConfig | None = None,
    block_size: int = 128,
) -> BenchRecord:
    """One routed-attention row; d_expert column reports the expert's
    projection width (heads_per_expert * d_head)."""
    config, x, weights, routing, order = _momha_problem(
        d_model, d_head, num_heads, k, num_experts, tokens, seq_len, seed)
    if mode == "fused":
        def run(ledger=None):
            momha_forward(x, weights, routing, order, config, seq_len,
                          training=False, tile=tile, ledger=ledger)
    elif mode == "baseline":
        baseline = BaselineConfig(block_size=block_size)

        def run(ledger=None):
            baseline_momha_pipeline(x, weights, routing, order, config,
                                    seq_len, baseline, ledger=ledger)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _measure(
        run, lambda ledger: run(ledger=ledger), mode=mode, k=k,
        num_experts=num_experts, d_model=d_model, d_expert=config.d_proj,
        tokens=tokens, warmup=warmup, repeats=repeats,
    )


def sweep_granularity(
    d_model: int,
    d_ff: int,
    tokens: int,
    *,
    ks: tuple[int, ...] = (1, 2, 4, 8, 16),
    seed: int = 0,
    repeats: int = 100,
    warmup: int = 10,
    tile: TileConfig | None = None,
    block_size: int = 128,
) -> list[BenchRecord]:
    """Hold the active width d_ff = k * d_expert fixed and vary granularity.

    Each k contributes a fused and a padded-baseline row with E = 8k experts
    and d_expert = d_ff / k; one dense row provides the unrouted comparator
    at the same active width.
    """
    records = [bench_dense_mlp(d_model, d_ff, tokens, seed=seed,
                               repeats=repeats, warmup=warmup)]
    for i, k in enumerate(ks):
        if d_ff % k:
            raise ValueError(f"d_ff {d_ff} is not divisible by k {k}")
        d_expert = d_ff // k
        num_experts = 8 * k
        for mode in ("fused", "baseline"):
            records.append(bench_smoe_mlp(
                d_model, d_expert, num_experts, k, tokens, mode=mode,
                seed=seed + 31 * i, repeats=repeats, warmup=warmup,
                tile=tile, block_size=block_size,
            ))
    return records


def sweep_sparsity(
    d_model: int,
    d_expert: int,
    tokens: int,
    *,
    num_experts: int = 64,
    ks: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64),
    seed: int = 0,
    repeats: int = 100,
    warmup: int = 10,
    tile: TileConfig | None = None,
) -> list[BenchRecord]:
    """Hold the expert pool fixed and vary how many experts each token uses.

    Active width grows as k * d_expert; the dense comparator runs all
    num_experts experts' worth of width, so at k = num_experts the fused
    row performs exactly the dense row's multiply-accumulates.
    """
    records = [bench_dense_mlp(d_model, num_experts * d_expert, tokens,
                               seed=seed, repeats=repeats, warmup=warmup)]
    for i, k in enumerate(ks):
        if k > num_experts:
            raise ValueError(f"k {k} exceeds expert count {num_experts}")
        records.append(bench_smoe_mlp(
            d_model, d_expert, num_experts, k, tokens, mode="fused",
            seed=seed + 31 * i, repeats=repeats, warmup=warmup, tile=tile,
        ))
    return records


def sweep_attention(
    d_model: int,
    d_head: int,
    num_heads: int,
    tokens: int,
    seq_len: int,
    *,
    ks: tuple[int, ...] = (1, 2, 4, 8),
    seed: int = 0,
    repeats: int = 100,
    warmup: int = 10,
    tile: TileConfig | None = None,
    block_size: int = 128,
) -> list[BenchRecord]:
    """Split num_heads query heads across k experts (E = 8k) and compare the
    fused routed-attention path with the padded group-copy staging."""
    records = []
    for i, k in enumerate(ks):
        if num_heads % k:
            raise ValueError(f"num_heads {num_heads} is not divisible by k {k}")
        for mode in ("fused", "baseline"):
            records.append(bench_momha(
                d_model, d_head, num_heads, k, 8 * k, tokens, seq_len,
                mode=mode, seed=seed + 31 * i, repeats=repeats,
                warmup=warmup, tile=tile, block_size=block_size,
            ))
    return records
