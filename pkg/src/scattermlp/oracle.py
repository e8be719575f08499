"""Independent reference implementations and the padded-copy baseline.

Everything here is deliberately naive: per-token and per-slot loops in
64-bit arithmetic, no shared code with the fused kernels, and no dependence
on the grouped bin layout. These are the ground truth the fused paths are
verified against.

The grouped baseline reproduces the conventional sparse-MLP staging that
the fused kernels exist to avoid: copy tokens into per-expert groups padded
to a block multiple, run contiguous per-expert matmuls (pad rows included),
copy results back to scattered order, then combine. Its allocations and
multiply-accumulates are logged so the fused pipeline's savings are
measurable rather than asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accounting import AllocationLedger
from .core_tensor import ACCUM, ExpertTensor, Matrix
from .errors import require_dims
from .kernels import LayoutFlag, add_macs
from .moe_layers import ACTIVATIONS, MomhaConfig, MomhaWeights, SmoeMlpConfig, init_smoe_mlp_weights
from .router import GroupedOrder, RoutingResult
from . import moe_layers
from .core_tensor import seeded_random_matrix


def triple_loop_matmul(a: Matrix, b: Matrix) -> np.ndarray:
    """Schoolbook three-loop product, 64-bit throughout. Returns float64."""
    require_dims(a.cols == b.rows, "matmul inner dimensions", (a.rows, a.cols), (b.rows, b.cols))
    out = np.zeros((a.rows, b.cols), dtype=ACCUM)
    ad = a.data
    bd = b.data
    for i in range(a.rows):
        for j in range(b.cols):
            acc = 0.0
            for m in range(a.cols):
                acc += float(ad[i, m]) * float(bd[m, j])
            out[i, j] = acc
    return out


def _position_experts(order: GroupedOrder) -> np.ndarray:
    return np.repeat(np.arange(order.num_experts), order.bin_counts)


def naive_scatter2scatter(
    x: Matrix,
    w: ExpertTensor,
    order: GroupedOrder,
    fan_out: int,
    layout: LayoutFlag,
    transpose_w: bool = False,
) -> np.ndarray:
    """Row-at-a-time evaluation of the fused kernel's contract (float64)."""
    experts = _position_experts(order)
    d_out = w.d_in if transpose_w else w.d_out
    out = np.zeros((order.num_slots, d_out), dtype=ACCUM)
    for i in range(order.num_slots):
        e = experts[i]
        src = i if layout.grouped_in else order.o[i] // fan_out
        blk = w.data[e].T if transpose_w else w.data[e]
        row = x.data[src].astype(ACCUM) @ blk.astype(ACCUM)
        dst = i if layout.grouped_out else order.o[i]
        out[dst] = row
    return out


def naive_smoe_mlp(
    x: Matrix,
    w1: ExpertTensor,
    w2: ExpertTensor,
    routing: RoutingResult,
    activation: str = "gelu",
) -> Matrix:
    """Per-token, per-selection evaluation of the routed MLP (float64).

    Never consults the grouped order, so agreement with the fused pipeline
    also certifies the grouping itself.
    """
    act, _ = ACTIVATIONS[activation]
    t = routing.num_tokens
    y = np.zeros((t, w2.d_out), dtype=ACCUM)
    for tok in range(t):
        xt = x.data[tok].astype(ACCUM)
        for sel in range(routing.k):
            e = int(routing.expert_idx[tok, sel])
            h = act(xt @ w1.data[e].astype(ACCUM))
            y[tok] += float(routing.p[tok, sel]) * (h @ w2.data[e].astype(ACCUM))
    return Matrix(y.astype(x.dtype))


def dense_mlp_reference(x: Matrix, w1: Matrix, w2: Matrix, activation: str = "gelu") -> Matrix:
    """Plain two-layer MLP in float64; the single-expert comparator."""
    act, _ = ACTIVATIONS[activation]
    h = act(x.data.astype(ACCUM) @ w1.data.astype(ACCUM))
    return Matrix((h @ w2.data.astype(ACCUM)).astype(x.dtype))


def naive_attention(
    q: Matrix,
    keys: Matrix,
    values: Matrix,
    slot_tokens: np.ndarray,
    seq_len: int,
    d_head: int,
    causal: bool,
) -> np.ndarray:
    """Slot-at-a-time, head-at-a-time masked softmax attention (float64)."""
    n = keys.rows
    out = np.zeros((q.rows, q.cols), dtype=ACCUM)
    for s in range(q.rows):
        tok = int(slot_tokens[s])
        lo = (tok // seq_len) * seq_len
        hi = lo + seq_len
        allowed = [u for u in range(lo, hi) if (not causal) or u - lo <= tok - lo]
        for c0 in range(0, q.cols, d_head):
            c1 = c0 + d_head
            qv = q.data[s, c0:c1].astype(ACCUM)
            scores = np.array(
                [qv @ keys.data[u, c0:c1].astype(ACCUM) for u in allowed]
            ) / math.sqrt(d_head)
            scores -= scores.max()
            w8 = np.exp(scores)
            w8 /= w8.sum()
            for wi, u in zip(w8, allowed):
                out[s, c0:c1] += wi * values.data[u, c0:c1].astype(ACCUM)
    return out


def naive_momha(
    x: Matrix,
    weights: MomhaWeights,
    routing: RoutingResult,
    config: MomhaConfig,
    seq_len: int,
) -> Matrix:
    """Per-slot routed attention: materialize each selected expert's queries,
    run dense per-head attention, project and combine per slot (float64)."""
    n = x.rows
    xd = x.data.astype(ACCUM)
    keys = xd @ weights.wk.data.astype(ACCUM)
    values = xd @ weights.wv.data.astype(ACCUM)
    y = np.zeros((n, config.d_model), dtype=ACCUM)
    for tok in range(n):
        lo = (tok // seq_len) * seq_len
        hi = lo + seq_len
        allowed = [u for u in range(lo, hi) if (not config.causal) or u <= tok]
        for sel in range(config.k):
            e = int(routing.expert_idx[tok, sel])
            qrow = xd[tok] @ weights.wq.data[e].astype(ACCUM)
            attn = np.zeros(config.d_proj, dtype=ACCUM)
            for c0 in range(0, config.d_proj, config.d_head):
                c1 = c0 + config.d_head
                scores = np.array(
                    [qrow[c0:c1] @ keys[u, c0:c1] for u in allowed]
                ) / math.sqrt(config.d_head)
                scores -= scores.max()
                w8 = np.exp(scores)
                w8 /= w8.sum()
                for wi, u in zip(w8, allowed):
                    attn[c0:c1] += wi * values[u, c0:c1]
            y[tok] += float(routing.p[tok, sel]) * (attn @ weights.wo.data[e].astype(ACCUM))
    return Matrix(y.astype(x.dtype))


def dense_mha_reference(
    x: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    seq_len: int,
    d_head: int,
    causal: bool,
) -> Matrix:
    """Standard dense multi-head attention in float64 (the E=1, k=1 comparator)."""
    xd = x.data.astype(ACCUM)
    q = xd @ wq.data.astype(ACCUM)
    keys = xd @ wk.data.astype(ACCUM)
    values = xd @ wv.data.astype(ACCUM)
    n = x.rows
    ctx = np.zeros_like(q)
    for lo in range(0, n, seq_len):
        hi = lo + seq_len
        for c0 in range(0, q.shape[1], d_head):
            c1 = c0 + d_head
            scores = q[lo:hi, c0:c1] @ keys[lo:hi, c0:c1].T / math.sqrt(d_head)
            if causal:
                t = hi - lo
                scores = np.where(np.arange(t)[:, None] < np.arange(t)[None, :], -np.inf, scores)
            scores -= scores.max(axis=1, keepdims=True)
            w8 = np.exp(scores)
            w8 /= w8.sum(axis=1, keepdims=True)
            ctx[lo:hi, c0:c1] = w8 @ values[lo:hi, c0:c1]
    return Matrix((ctx @ wo.data.astype(ACCUM)).astype(x.dtype))


def finite_difference_gradient(loss_fn, params: dict[str, np.ndarray], eps: float = 1e-3):
    """Central differences of loss_fn wrt every entry of every param array.

    loss_fn takes no arguments and must read the (temporarily perturbed)
    arrays. The divisor is the actually-stored step, which keeps the
    estimate honest for narrow dtypes.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grads = {}
    for name, arr in params.items():
        g = np.zeros(arr.shape, dtype=ACCUM)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            hi = np.asarray(orig + eps, dtype=arr.dtype)
            lo = np.asarray(orig - eps, dtype=arr.dtype)
            flat[i] = hi
            f_hi = loss_fn()
            flat[i] = lo
            f_lo = loss_fn()
            flat[i] = orig
            gflat[i] = (f_hi - f_lo) / (float(hi) - float(lo))
        grads[name] = g
    return grads


# ---------------------------------------------------------------------------
# Padded group-copy baseline


@dataclass(frozen=True)
class BaselineConfig:
    """Block granularity the baseline pads every expert bin up to."""

    block_size: int = 128

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")


def padded_bin_rows(bin_counts: np.ndarray, block_size: int) -> int:
    """sum_e ceil(count_e / block) * block, the padded group row count."""
    counts = np.asarray(bin_counts, dtype=np.int64)
    return int(np.sum(-(-counts // block_size) * block_size))


def baseline_padded_bytes(bin_counts: np.ndarray, block_size: int, width: int) -> int:
    """Closed-form logical bytes of one padded grouped buffer of that width."""
    return padded_bin_rows(bin_counts, block_size) * width * 4


def baseline_grouped_pipeline(
    x: Matrix,
    w1: ExpertTensor,
    w2: ExpertTensor,
    routing: RoutingResult,
    order: GroupedOrder,
    config: BaselineConfig = BaselineConfig(),
    activation: str = "gelu",
    ledger: AllocationLedger | None = None,
) -> Matrix:
    """Group-copy / pad / contiguous-matmul / scatter-copy reference MLP.

    Numerically equivalent to the fused pipeline; structurally the thing the
    fused pipeline is measured against. Pad rows are zero (the activations
    here all map 0 to 0) and are computed like real rows, so the MAC counter
    reflects the padding overhead.
    """
    act, _ = ACTIVATIONS[activation]
    k = routing.k
    counts = order.bin_counts
    block = config.block_size
    padded_counts = -(-counts // block) * block
    padded_offsets = np.zeros(order.num_experts + 1, dtype=np.int64)
    np.cumsum(padded_counts, out=padded_offsets[1:])
    p_rows = int(padded_offsets[-1])
    d_model, d_expert = w1.d_in, w1.d_out
    num_slots = order.num_slots

    grouped_x = np.zeros((p_rows, d_model), dtype=ACCUM)
    if ledger:
        ledger.alloc("baseline.grouped_x_padded", p_rows, d_model, "forward")
    for e in range(order.num_experts):
        lo, hi = int(order.bin_offsets[e]), int(order.bin_offsets[e + 1])
        if lo == hi:
            continue
        dst = int(padded_offsets[e])
        grouped_x[dst:dst + (hi - lo)] = x.data[order.o[lo:hi] // k]

    grouped_h = np.zeros((p_rows, d_expert), dtype=ACCUM)
    if ledger:
        ledger.alloc("baseline.grouped_hidden_padded", p_rows, d_expert, "forward")
    grouped_out = np.zeros((p_rows, d_model), dtype=ACCUM)
    if ledger:
        ledger.alloc("baseline.grouped_out_padded", p_rows, d_model, "forward")
    for e in range(order.num_experts):
        lo, hi = int(padded_offsets[e]), int(padded_offsets[e + 1])
        if lo == hi:
            continue
        grouped_h[lo:hi] = act(grouped_x[lo:hi] @ w1.data[e].astype(ACCUM))
        grouped_out[lo:hi] = grouped_h[lo:hi] @ w2.data[e].astype(ACCUM)
    add_macs(int(np.sum(padded_counts * (d_model * d_expert + d_expert * d_model))))

    scattered = np.zeros((num_slots, d_model), dtype=ACCUM)
    if ledger:
        ledger.alloc("baseline.scattered_y_hat", num_slots, d_model, "forward")
    for e in range(order.num_experts):
        lo, hi = int(order.bin_offsets[e]), int(order.bin_offsets[e + 1])
        if lo == hi:
            continue
        src = int(padded_offsets[e])
        scattered[order.o[lo:hi]] = grouped_out[src:src + (hi - lo)]

    t = num_slots // k
    y = (routing.p.astype(ACCUM)[:, :, None] * scattered.reshape(t, k, d_model)).sum(axis=1)
    if ledger:
        ledger.alloc("baseline.y", t, d_model, "forward")
    return Matrix(y.astype(x.dtype))


def fused_pipeline_ledger(
    config: SmoeMlpConfig,
    num_tokens: int,
    seed: int = 0,
    *,
    training: bool = True,
) -> AllocationLedger:
    """Run the fused MLP on seeded inputs and return its allocation ledger.

    Forward-phase entries are what inference allocates (grouped hidden and
    the combined output); backward-phase entries are the training-only
    retained activations, gradients, and scratch.
    """
    from .router import compute_grouped_order, gate_forward, topk_select

    ledger = AllocationLedger()
    x = seeded_random_matrix(num_tokens, config.d_model, seed, scale=1.0)
    w1, w2 = init_smoe_mlp_weights(config, seed + 101)
    wg = seeded_random_matrix(config.d_model, config.num_experts, seed + 7,
                              scale=1.0 / math.sqrt(config.d_model))
    routing = topk_select(gate_forward(x, wg), config.k)
    order = compute_grouped_order(routing)
    y, ctx = moe_layers.smoe_mlp_forward(
        x, w1, w2, routing, order, activation=config.activation,
        training=training, ledger=ledger,
    )
    if training:
        dy = seeded_random_matrix(y.rows, y.cols, seed + 13, scale=1.0)
        moe_layers.smoe_mlp_backward(ctx, dy, ledger=ledger)
    return ledger


def baseline_pipeline_ledger(
    config: SmoeMlpConfig,
    num_tokens: int,
    seed: int = 0,
    baseline: BaselineConfig = BaselineConfig(),
) -> AllocationLedger:
    """Run the padded baseline on the same seeded problem; return its ledger."""
    from .router import compute_grouped_order, gate_forward, topk_select

    ledger = AllocationLedger()
    x = seeded_random_matrix(num_tokens, config.d_model, seed, scale=1.0)
    w1, w2 = init_smoe_mlp_weights(config, seed + 101)
    wg = seeded_random_matrix(config.d_model, config.num_experts, seed + 7,
                              scale=1.0 / math.sqrt(config.d_model))
    routing = topk_select(gate_forward(x, wg), config.k)
    order = compute_grouped_order(routing)
    baseline_grouped_pipeline(x, w1, w2, routing, order, baseline,
                              activation=config.activation, ledger=ledger)
    return ledger


def baseline_momha_pipeline(
    x: Matrix,
    weights: MomhaWeights,
    routing: RoutingResult,
    order: GroupedOrder,
    config: MomhaConfig,
    seq_len: int,
    baseline: BaselineConfig = BaselineConfig(),
    ledger: AllocationLedger | None = None,
) -> Matrix:
    """Group-copy / pad / matmul / scatter-copy staging of routed attention.

    Same math as the fused routed-attention layer, but the query and output
    projections run on padded per-expert group copies, with explicit
    scattered intermediates on both sides of the attention stage. The
    attention math itself is shared; only the staging around the expert
    transforms differs, so the ledger and MAC deltas isolate the copy and
    padding cost.
    """
    n = x.rows
    k = config.k
    counts = order.bin_counts
    block = baseline.block_size
    padded_counts = -(-counts // block) * block
    padded_offsets = np.zeros(order.num_experts + 1, dtype=np.int64)
    np.cumsum(padded_counts, out=padded_offsets[1:])
    p_rows = int(padded_offsets[-1])
    d_model, d_proj = config.d_model, config.d_proj
    num_slots = order.num_slots

    keys = Matrix((x.data.astype(ACCUM) @ weights.wk.data.astype(ACCUM)).astype(x.dtype))
    values = Matrix((x.data.astype(ACCUM) @ weights.wv.data.astype(ACCUM)).astype(x.dtype))
    if ledger:
        ledger.alloc("baseline.keys", n, d_proj, "forward")
        ledger.alloc("baseline.values", n, d_proj, "forward")

    grouped_x = np.zeros((p_rows, d_model), dtype=ACCUM)
    q_grouped = np.zeros((p_rows, d_proj), dtype=ACCUM)
    if ledger:
        ledger.alloc("baseline.grouped_x_padded", p_rows, d_model, "forward")
        ledger.alloc("baseline.grouped_q_padded", p_rows, d_proj, "forward")
    for e in range(order.num_experts):
        lo, hi = int(order.bin_offsets[e]), int(order.bin_offsets[e + 1])
        if lo == hi:
            continue
        dst = int(padded_offsets[e])
        grouped_x[dst:dst + (hi - lo)] = x.data[order.o[lo:hi] // k]
        q_grouped[dst:dst + padded_counts[e]] = (
            grouped_x[dst:dst + padded_counts[e]] @ weights.wq.data[e].astype(ACCUM)
        )
    add_macs(int(np.sum(padded_counts * (d_model * d_proj))))

    q_scattered = np.zeros((num_slots, d_proj), dtype=np.float32)
    if ledger:
        ledger.alloc("baseline.q_scattered", num_slots, d_proj, "forward")
    for e in range(order.num_experts):
        lo, hi = int(order.bin_offsets[e]), int(order.bin_offsets[e + 1])
        if lo == hi:
            continue
        src = int(padded_offsets[e])
        q_scattered[order.o[lo:hi]] = q_grouped[src:src + (hi - lo)].astype(np.float32)

    slot_tokens = np.arange(num_slots, dtype=np.int64) // k
    attn = moe_layers.attention(
        Matrix(q_scattered), keys, values, slot_tokens, seq_len,
        config.d_head, causal=config.causal,
    )
    if ledger:
        ledger.alloc("baseline.attn_out", num_slots, d_proj, "forward")

    grouped_attn = np.zeros((p_rows, d_proj), dtype=ACCUM)
    grouped_out = np.zeros((p_rows, d_model), dtype=ACCUM)
    if ledger:
        ledger.alloc("baseline.grouped_attn_padded", p_rows, d_proj, "forward")
        ledger.alloc("baseline.grouped_out_padded", p_rows, d_model, "forward")
    for e in range(order.num_experts):
        lo, hi = int(order.bin_offsets[e]), int(order.bin_offsets[e + 1])
        if lo == hi:
            continue
        dst = int(padded_offsets[e])
        grouped_attn[dst:dst + (hi - lo)] = attn.data[order.o[lo:hi]]
        grouped_out[dst:dst + padded_counts[e]] = (
            grouped_attn[dst:dst + padded_counts[e]] @ weights.wo.data[e].astype(ACCUM)
        )
    add_macs(int(np.sum(padded_counts * (d_proj * d_model))))

    scattered = np.zeros((num_slots, d_model), dtype=ACCUM)
    if ledger:
        ledger.alloc("baseline.scattered_y_hat", num_slots, d_model, "forward")
    for e in range(order.num_experts):
        lo, hi = int(order.bin_offsets[e]), int(order.bin_offsets[e + 1])
        if lo == hi:
            continue
        src = int(padded_offsets[e])
        scattered[order.o[lo:hi]] = grouped_out[src:src + (hi - lo)]

    y = (routing.p.astype(ACCUM)[:, :, None] * scattered.reshape(n, k, d_model)).sum(axis=1)
    if ledger:
        ledger.alloc("baseline.y", n, d_model, "forward")
    return Matrix(y.astype(x.dtype))
