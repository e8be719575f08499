"""Padding-free grouped kernels over scattered or grouped row layouts.

The central op is scatter2scatter: for every grouped position i inside
expert e's bin it reads one input row (directly at i when the input is
already grouped, else at o[i] // fan_out in the scattered buffer), applies
expert e's weight block, and writes one output row (at i for grouped
output, else at slot o[i]). All four layout combinations run without any
padded or copied intermediate the size of the full input; staging is
bounded by one row tile.

Work is tiled per expert bin (short tiles at bin edges, never across
bins) and row tiles can execute on a thread pool. Each grouped position
maps to exactly one output row in every layout combination, so writes are
partitioned by tile and no atomics or locks guard the output.

Every kernel accumulates dot products in 64-bit and rounds once to the
storage dtype, which keeps results independent of tile sizes and of the
worker count. A module-level multiply-accumulate counter records exactly
sum_e count_e * d_in * d_out per call for the padding-freedom checks.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core_tensor import ACCUM, ExpertTensor, Matrix
from .errors import require_dims
from .router import GroupedOrder


def default_worker_count() -> int:
    env = os.environ.get("SCATTERMLP_WORKERS")
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError(f"SCATTERMLP_WORKERS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


@dataclass(frozen=True)
class TileConfig:
    """Cache blocking and parallelism knobs. Results never depend on these."""

    tile_rows: int = 64
    tile_cols: int = 64
    tile_inner: int = 64
    worker_count: int = field(default_factory=default_worker_count)

    def __post_init__(self):
        for name in ("tile_rows", "tile_cols", "tile_inner", "worker_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class LayoutFlag:
    """Whether the kernel's input/output rows are in grouped (bin) order."""

    grouped_in: bool = False
    grouped_out: bool = False


SCATTERED_TO_GROUPED = LayoutFlag(grouped_in=False, grouped_out=True)
GROUPED_TO_SCATTERED = LayoutFlag(grouped_in=True, grouped_out=False)
SCATTERED_TO_SCATTERED = LayoutFlag(grouped_in=False, grouped_out=False)
GROUPED_TO_GROUPED = LayoutFlag(grouped_in=True, grouped_out=True)

_mac_lock = threading.Lock()
_mac_count = 0
_fault_inject = False

_pool_lock = threading.Lock()
_pools: dict[int, ThreadPoolExecutor] = {}


def reset_mac_count() -> None:
    global _mac_count
    with _mac_lock:
        _mac_count = 0


def mac_count() -> int:
    with _mac_lock:
        return _mac_count


def add_macs(n: int) -> None:
    """Credit n multiply-accumulates to the counter (kernels and baselines)."""
    global _mac_count
    with _mac_lock:
        _mac_count += int(n)


def set_fault_injection(enabled: bool) -> None:
    """Test hook: corrupt one scatter2scatter output element per call.

    Exists so the verification command can prove it detects a wrong kernel;
    never enable outside of that self-test.
    """
    global _fault_inject
    _fault_inject = bool(enabled)


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pool_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="scattermlp")
            _pools[workers] = pool
        return pool


def _run_tasks(tasks, fn, workers: int) -> None:
    if workers > 1 and len(tasks) > 1:
        list(_pool(workers).map(fn, tasks))
    else:
        for t in tasks:
            fn(t)


def _bin_row_tiles(order: GroupedOrder, tile_rows: int):
    """(expert, row_start, row_end) tiles; tiles never straddle a bin edge."""
    offsets = order.bin_offsets
    tasks = []
    for e in range(order.num_experts):
        start, end = int(offsets[e]), int(offsets[e + 1])
        for i0 in range(start, end, tile_rows):
            tasks.append((e, i0, min(i0 + tile_rows, end)))
    return tasks


def _expert_block(w: ExpertTensor, e: int, transpose_w: bool) -> np.ndarray:
    blk = w.data[e]
    return blk.T if transpose_w else blk


def scatter2scatter(
    x: Matrix,
    w: ExpertTensor,
    order: GroupedOrder,
    fan_out: int,
    layout: LayoutFlag = SCATTERED_TO_SCATTERED,
    tile: TileConfig | None = None,
    *,
    transpose_w: bool = False,
    out: Matrix | None = None,
) -> Matrix:
    """Fused gather -> per-expert linear transform -> scatter.

    fan_out is the number of scattered slots fed by each input row (the
    router's top-k when transforming token embeddings, 1 when the input is
    already slot-resolved). With transpose_w the weight blocks are read with
    swapped index roles (never materialized transposed), which is how the
    backward applies W^T.

    Returns a T*k x d_out matrix whose rows are in grouped order when
    layout.grouped_out else in scattered slot order. Pass ``out`` to write
    into an existing buffer of that shape.
    """
    tile = tile or TileConfig()
    if fan_out < 1:
        raise ValueError(f"fan_out must be >= 1, got {fan_out}")
    num_slots = order.num_slots
    require_dims(
        order.num_experts == w.num_experts,
        "order bins vs expert stack",
        (order.num_experts,),
        (w.num_experts,),
    )
    d_in = w.d_out if transpose_w else w.d_in
    d_out = w.d_in if transpose_w else w.d_out
    require_dims(x.cols == d_in, "input width vs expert weights", (x.rows, x.cols), (d_in, d_out))
    if layout.grouped_in:
        require_dims(x.rows == num_slots, "grouped input rows vs slots", (x.rows,), (num_slots,))
    else:
        if x.rows * fan_out != num_slots:
            raise ValueError(
                f"scattered input rows ({x.rows}) * fan_out ({fan_out}) must equal T*k ({num_slots})"
            )
    if out is None:
        result = Matrix(np.empty((num_slots, d_out), dtype=x.dtype))
    else:
        require_dims(
            out.rows == num_slots and out.cols == d_out,
            "out buffer",
            (out.rows, out.cols),
            (num_slots, d_out),
        )
        if out.dtype != x.dtype:
            raise ValueError(f"out dtype {out.dtype} does not match input dtype {x.dtype}")
        result = out

    o = order.o
    xd = x.data
    rd = result.data

    def run(task):
        e, i0, i1 = task
        if layout.grouped_in:
            src = xd[i0:i1]
        else:
            src = xd[o[i0:i1] // fan_out]
        block = _tiled_block(src, _expert_block(w, e, transpose_w), tile).astype(x.dtype, copy=False)
        if layout.grouped_out:
            rd[i0:i1] = block
        else:
            rd[o[i0:i1]] = block

    tasks = _bin_row_tiles(order, tile.tile_rows)
    _run_tasks(tasks, run, tile.worker_count)
    add_macs(int(np.sum(order.bin_counts * (d_in * d_out))))
    if _fault_inject and rd.size:
        rd[0, 0] += 0.01
    return result


def _tiled_block(src: np.ndarray, weight: np.ndarray, tile: TileConfig) -> np.ndarray:
    """src @ weight with 64-bit accumulation, blocked by tile_cols/tile_inner."""
    src64 = src.astype(ACCUM, copy=False)
    w64 = weight.astype(ACCUM, copy=False)
    r, d_in = src64.shape
    d_out = w64.shape[1]
    if d_in <= tile.tile_inner and d_out <= tile.tile_cols:
        return src64 @ w64
    out = np.empty((r, d_out), dtype=ACCUM)
    for c0 in range(0, d_out, tile.tile_cols):
        c1 = min(c0 + tile.tile_cols, d_out)
        acc = np.zeros((r, c1 - c0), dtype=ACCUM)
        for k0 in range(0, d_in, tile.tile_inner):
            k1 = min(k0 + tile.tile_inner, d_in)
            acc += src64[:, k0:k1] @ w64[k0:k1, c0:c1]
        out[:, c0:c1] = acc
    return out


def scatter_combine(
    x: Matrix,
    w: ExpertTensor,
    order: GroupedOrder,
    fan_out: int,
    p_flat: np.ndarray,
    combine_cols: int,
    grouped_in: bool,
    tile: TileConfig | None = None,
) -> Matrix:
    """scatter2scatter with the weighted slot-sum fused into the write.

    Instead of materializing the T*k x d_out pre-combine buffer, each
    transformed row is scaled by its slot weight and accumulated straight
    into output row o[i] // combine_cols, in 64-bit until the final round.
    Used by the inference path of the weighted linear transform. Runs the
    bins serially because output rows are shared across bins.
    """
    tile = tile or TileConfig()
    if fan_out < 1:
        raise ValueError(f"fan_out must be >= 1, got {fan_out}")
    num_slots = order.num_slots
    if num_slots % combine_cols:
        raise ValueError(f"combine width {combine_cols} must divide T*k ({num_slots})")
    require_dims(p_flat.shape == (num_slots,), "combine weights", p_flat.shape, (num_slots,))
    d_in, d_out = w.d_in, w.d_out
    require_dims(x.cols == d_in, "input width vs expert weights", (x.rows, x.cols), (d_in, d_out))
    if grouped_in:
        require_dims(x.rows == num_slots, "grouped input rows vs slots", (x.rows,), (num_slots,))
    elif x.rows * fan_out != num_slots:
        raise ValueError(
            f"scattered input rows ({x.rows}) * fan_out ({fan_out}) must equal T*k ({num_slots})"
        )
    out_rows = num_slots // combine_cols
    acc = np.zeros((out_rows, d_out), dtype=ACCUM)
    o = order.o
    xd = x.data
    for e, i0, i1 in _bin_row_tiles(order, tile.tile_rows):
        src = xd[i0:i1] if grouped_in else xd[o[i0:i1] // fan_out]
        block = _tiled_block(src, w.data[e], tile)
        slots = o[i0:i1]
        block *= p_flat[slots].astype(ACCUM)[:, None]
        np.add.at(acc, slots // combine_cols, block)
    add_macs(int(np.sum(order.bin_counts * (d_in * d_out))))
    return Matrix(acc.astype(x.dtype))


def group(
    x: Matrix,
    order: GroupedOrder,
    weights: np.ndarray | None = None,
    fan_out: int = 1,
    out: Matrix | None = None,
) -> Matrix:
    """Explicit copy into grouped order: row i <- x[o[i] // fan_out] * weights[o[i]].

    This is the only operation in the package that materializes a grouped
    copy; the fused kernels exist so it is needed at most once per transform.
    """
    if fan_out < 1:
        raise ValueError(f"fan_out must be >= 1, got {fan_out}")
    num_slots = order.num_slots
    if x.rows * fan_out != num_slots:
        raise ValueError(
            f"input rows ({x.rows}) * fan_out ({fan_out}) must equal T*k ({num_slots})"
        )
    if weights is not None:
        require_dims(weights.shape == (num_slots,), "slot weights", weights.shape, (num_slots,))
    if out is None:
        result = Matrix(np.empty((num_slots, x.cols), dtype=x.dtype))
    else:
        require_dims(
            out.rows == num_slots and out.cols == x.cols,
            "out buffer",
            (out.rows, out.cols),
            (num_slots, x.cols),
        )
        if out.dtype != x.dtype:
            raise ValueError(f"out dtype {out.dtype} does not match input dtype {x.dtype}")
        result = out
    src_rows = order.o // fan_out
    np.take(x.data, src_rows, axis=0, out=result.data)
    if weights is not None:
        result.data *= weights[order.o][:, None].astype(x.dtype, copy=False)
    return result


def group_xty(
    xg: Matrix,
    yg: Matrix,
    order: GroupedOrder,
    tile: TileConfig | None = None,
) -> ExpertTensor:
    """Per-expert Gram blocks: dW[e] = Xg[bin e]^T @ Yg[bin e].

    Both inputs must already be in grouped order. Empty bins yield zero
    blocks. This is the weight-gradient kernel.
    """
    tile = tile or TileConfig()
    num_slots = order.num_slots
    require_dims(xg.rows == num_slots, "grouped X rows vs slots", (xg.rows,), (num_slots,))
    require_dims(yg.rows == num_slots, "grouped Y rows vs slots", (yg.rows,), (num_slots,))
    d_in, d_out = xg.cols, yg.cols
    dw = np.zeros((order.num_experts, d_in, d_out), dtype=xg.dtype)
    offsets = order.bin_offsets
    xd, yd = xg.data, yg.data

    def run(e):
        start, end = int(offsets[e]), int(offsets[e + 1])
        if start == end:
            return
        acc = np.zeros((d_in, d_out), dtype=ACCUM)
        for r0 in range(start, end, tile.tile_rows):
            r1 = min(r0 + tile.tile_rows, end)
            acc += xd[r0:r1].astype(ACCUM, copy=False).T @ yd[r0:r1].astype(ACCUM, copy=False)
        dw[e] = acc.astype(xg.dtype)

    _run_tasks(list(range(order.num_experts)), run, tile.worker_count)
    add_macs(int(np.sum(order.bin_counts * (d_in * d_out))))
    return ExpertTensor(dw)
