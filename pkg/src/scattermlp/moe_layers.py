"""Routed layers built from the expert-linear transform.

The MLP runs scattered -> grouped through the first expert weights, applies
the activation on the grouped hidden buffer (the hidden state never exists
in scattered order), then grouped -> combined through the second expert
weights with the routing weights folded into the combine. Exactly one
grouped copy is ever made per transform, inside the backward.

The attention layer routes whole tokens to expert query/output projections
while keys and values stay dense and shared: query head (slot, j) attends
with key/value head j of the same batch element, queries keep chronological
order (slot s belongs to token s // k), and causal masking applies within
each sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import parallel_linear as pl
from .accounting import AllocationLedger
from .core_tensor import (
    ACCUM,
    ExpertTensor,
    Matrix,
    matmul,
    seeded_random_expert_tensor,
    seeded_random_matrix,
)
from .errors import require_dims
from .kernels import SCATTERED_TO_GROUPED, SCATTERED_TO_SCATTERED, LayoutFlag, TileConfig
from .router import GroupedOrder, RoutingResult

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(z):
    return 0.5 * z * (1.0 + erf(z * _INV_SQRT2))


def _gelu_grad(z):
    return 0.5 * (1.0 + erf(z * _INV_SQRT2)) + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z):
    return (z > 0.0).astype(z.dtype)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


ACTIVATIONS = {
    "gelu": (_gelu, _gelu_grad),
    "relu": (_relu, _relu_grad),
    "silu": (_silu, _silu_grad),
}


def apply_activation(values: np.ndarray, name: str) -> np.ndarray:
    """Elementwise activation, evaluated in 64-bit and rounded once."""
    fn, _ = _activation(name)
    return fn(values.astype(ACCUM, copy=False)).astype(values.dtype)


def activation_grad(pre: np.ndarray, name: str) -> np.ndarray:
    _, grad = _activation(name)
    return grad(pre.astype(ACCUM, copy=False)).astype(pre.dtype)


def _activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


@dataclass(frozen=True)
class SmoeMlpConfig:
    """Shapes for the routed MLP: two expert stacks around one activation."""

    d_model: int
    d_expert: int
    num_experts: int
    k: int
    activation: str = "gelu"

    def __post_init__(self):
        if min(self.d_model, self.d_expert, self.num_experts, self.k) < 1:
            raise ValueError(f"all MLP dimensions must be >= 1: {self}")
        if self.k > self.num_experts:
            raise ValueError(f"k={self.k} exceeds expert count {self.num_experts}")
        _activation(self.activation)


def init_smoe_mlp_weights(config: SmoeMlpConfig, seed: int, dtype=np.float32):
    """Seeded (W1, W2) expert stacks with 1/sqrt(d_in) scaling."""
    w1 = seeded_random_expert_tensor(
        config.num_experts, config.d_model, config.d_expert, seed,
        scale=1.0 / math.sqrt(config.d_model), dtype=dtype,
    )
    w2 = seeded_random_expert_tensor(
        config.num_experts, config.d_expert, config.d_model, seed + 1,
        scale=1.0 / math.sqrt(config.d_expert), dtype=dtype,
    )
    return w1, w2


@dataclass
class SmoeMlpContext:
    hidden_ctx: pl.LinearContext
    output_ctx: pl.LinearContext
    h_pre: Matrix
    activation: str


@dataclass
class SmoeMlpGradients:
    dx: Matrix
    dw1: ExpertTensor
    dw2: ExpertTensor
    dp: np.ndarray


def smoe_mlp_forward(
    x: Matrix,
    w1: ExpertTensor,
    w2: ExpertTensor,
    routing: RoutingResult,
    order: GroupedOrder,
    *,
    activation: str = "gelu",
    training: bool = True,
    tile: TileConfig | None = None,
    ledger: AllocationLedger | None = None,
) -> tuple[Matrix, SmoeMlpContext | None]:
    """Y[t] = sum_i p[t,i] * (activation(x[t] @ W1[e_i]) @ W2[e_i]).

    The hidden state exists only in grouped layout (T*k x d_expert); the
    routing weights are applied only at the second transform's combine.
    """
    require_dims(w1.d_out == w2.d_in, "expert hidden widths", (w1.d_in, w1.d_out), (w2.d_in, w2.d_out))
    require_dims(w1.d_in == x.cols, "input width vs W1", (x.rows, x.cols), (w1.d_in, w1.d_out))
    require_dims(w2.d_out == x.cols, "W2 output width vs model width", (w2.d_in, w2.d_out), (x.cols,))
    k = routing.k
    if order.num_slots != x.rows * k:
        raise ValueError(
            f"order covers {order.num_slots} slots but routing implies {x.rows}*{k}"
        )
    h, hidden_ctx = pl.forward(
        x, w1, order, p=None, fan_out=k, layout=SCATTERED_TO_GROUPED,
        tile=tile, training=training, ledger=ledger, name="mlp.hidden",
    )
    h_pre = None
    if training:
        # The activation input is retained before sigma runs in place.
        h_pre = h.copy()
        if ledger:
            ledger.alloc("mlp.h_preactivation", h.rows, h.cols, "backward")
    h.data[...] = apply_activation(h.data, activation)
    y, output_ctx = pl.forward(
        h, w2, order, p=routing.p, fan_out=1, layout=LayoutFlag(grouped_in=True, grouped_out=False),
        tile=tile, training=training, ledger=ledger, name="mlp.output",
    )
    if not training:
        return y, None
    return y, SmoeMlpContext(hidden_ctx=hidden_ctx, output_ctx=output_ctx, h_pre=h_pre, activation=activation)


def smoe_mlp_backward(
    ctx: SmoeMlpContext,
    dy: Matrix,
    *,
    tile: TileConfig | None = None,
    ledger: AllocationLedger | None = None,
) -> SmoeMlpGradients:
    """Gradients for the routed MLP; stops at dp (the router chains further).

    Reuse discipline across the two transforms: the output transform's slot
    gradients land in the activated hidden buffer, and the retained
    pre-combine output's storage is reused for the grouped input copy of the
    hidden transform's backward. No new T*k-row buffer is allocated.
    """
    out_ctx = ctx.output_ctx
    hid_ctx = ctx.hidden_ctx
    # The activated hidden buffer is module-owned: let the output transform's
    # input gradients overwrite it once dW2 has consumed the activations.
    out_ctx.scratch_grouped_x = out_ctx.x
    g2 = pl.backward(out_ctx, dy, tile=tile, ledger=ledger, name="mlp.output")
    dh = g2.dx
    dh.data *= activation_grad(ctx.h_pre.data, ctx.activation)
    # The retained pre-combine output (T*k x d_model) is dead now; its storage
    # takes the grouped input copy for the hidden transform's backward.
    hid_ctx.scratch_grouped_x = out_ctx.y_hat
    g1 = pl.backward(hid_ctx, dh, tile=tile, ledger=ledger, name="mlp.hidden")
    return SmoeMlpGradients(dx=g1.dx, dw1=g1.dw, dw2=g2.dw, dp=g2.dp)


@dataclass(frozen=True)
class MomhaConfig:
    """Routed multi-head attention shapes.

    Each expert owns heads_per_expert query heads of width d_head, so the
    active head count is num_heads = k * heads_per_expert and every expert
    projection is d_model x (heads_per_expert * d_head). Keys and values are
    dense and shared: query head (slot, j) attends with key/value head j.
    """

    d_model: int
    d_head: int
    num_heads: int
    heads_per_expert: int
    num_experts: int
    k: int
    causal: bool = True

    def __post_init__(self):
        if min(self.d_model, self.d_head, self.num_heads, self.heads_per_expert,
               self.num_experts, self.k) < 1:
            raise ValueError(f"all attention dimensions must be >= 1: {self}")
        if self.num_heads != self.k * self.heads_per_expert:
            raise ValueError(
                f"num_heads ({self.num_heads}) must equal k ({self.k}) * "
                f"heads_per_expert ({self.heads_per_expert})"
            )
        if self.k > self.num_experts:
            raise ValueError(f"k={self.k} exceeds expert count {self.num_experts}")

    @property
    def d_proj(self) -> int:
        """Width of every head-space projection: heads_per_expert * d_head."""
        return self.heads_per_expert * self.d_head


@dataclass
class MomhaWeights:
    wq: ExpertTensor  # (E, d_model, d_proj)
    wk: Matrix        # (d_model, d_proj), shared
    wv: Matrix        # (d_model, d_proj), shared
    wo: ExpertTensor  # (E, d_proj, d_model)


def init_momha_weights(config: MomhaConfig, seed: int, dtype=np.float32) -> MomhaWeights:
    d, dp_ = config.d_model, config.d_proj
    scale_in = 1.0 / math.sqrt(d)
    scale_out = 1.0 / math.sqrt(dp_)
    return MomhaWeights(
        wq=seeded_random_expert_tensor(config.num_experts, d, dp_, seed, scale=scale_in, dtype=dtype),
        wk=seeded_random_matrix(d, dp_, seed + 1, scale=scale_in, dtype=dtype),
        wv=seeded_random_matrix(d, dp_, seed + 2, scale=scale_in, dtype=dtype),
        wo=seeded_random_expert_tensor(config.num_experts, dp_, d, seed + 3, scale=scale_out, dtype=dtype),
    )


def _attention_blocks(slot_tokens: np.ndarray, num_tokens: int, seq_len: int):
    """Yield (slot indices, their within-sequence times, token span) per batch."""
    if num_tokens % seq_len:
        raise ValueError(f"token count {num_tokens} is not divisible by seq_len {seq_len}")
    for lo in range(0, num_tokens, seq_len):
        hi = lo + seq_len
        sel = np.nonzero((slot_tokens >= lo) & (slot_tokens < hi))[0]
        yield sel, slot_tokens[sel] - lo, lo, hi


def attention(
    q: Matrix,
    keys: Matrix,
    values: Matrix,
    slot_tokens: np.ndarray,
    seq_len: int,
    d_head: int,
    causal: bool = True,
) -> Matrix:
    """Scaled dot-product attention over per-slot queries and dense keys.

    slot_tokens maps each query row to its token; queries attend only within
    that token's sequence, and under causal masking only to keys at times at
    or before their own. Scores and softmax run in 64-bit.
    """
    require_dims(q.cols == keys.cols and keys.cols == values.cols,
                 "projection widths", (q.cols,), (keys.cols, values.cols))
    require_dims(keys.rows == values.rows, "key rows vs value rows", (keys.rows,), (values.rows,))
    if q.cols % d_head:
        raise ValueError(f"projection width {q.cols} is not divisible by d_head {d_head}")
    if slot_tokens.shape != (q.rows,):
        raise ValueError(f"slot map covers {slot_tokens.shape} slots, expected ({q.rows},)")
    n = keys.rows
    if slot_tokens.size and (slot_tokens.min() < 0 or slot_tokens.max() >= n):
        raise ValueError(f"slot map references tokens outside [0, {n})")
    out = np.empty((q.rows, q.cols), dtype=q.dtype)
    scale = 1.0 / math.sqrt(d_head)
    qd = q.data.astype(ACCUM, copy=False)
    kd = keys.data.astype(ACCUM, copy=False)
    vd = values.data.astype(ACCUM, copy=False)
    for sel, times, lo, hi in _attention_blocks(slot_tokens, n, seq_len):
        if sel.size == 0:
            continue
        kb = kd[lo:hi]
        vb = vd[lo:hi]
        mask = None
        if causal:
            mask = times[:, None] < np.arange(hi - lo)[None, :]
        for c0 in range(0, q.cols, d_head):
            c1 = c0 + d_head
            scores = (qd[sel, c0:c1] @ kb[:, c0:c1].T) * scale
            if mask is not None:
                scores = np.where(mask, -np.inf, scores)
            scores -= scores.max(axis=1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=1, keepdims=True)
            out[sel, c0:c1] = (weights @ vb[:, c0:c1]).astype(q.dtype)
    return Matrix(out)


def attention_backward(
    q: Matrix,
    keys: Matrix,
    values: Matrix,
    slot_tokens: np.ndarray,
    seq_len: int,
    d_head: int,
    causal: bool,
    d_out: Matrix,
):
    """Gradients (dq, dkeys, dvalues); probabilities are recomputed, not stored."""
    require_dims(d_out.rows == q.rows and d_out.cols == q.cols,
                 "attention grad shape", (d_out.rows, d_out.cols), (q.rows, q.cols))
    scale = 1.0 / math.sqrt(d_head)
    qd = q.data.astype(ACCUM, copy=False)
    kd = keys.data.astype(ACCUM, copy=False)
    vd = values.data.astype(ACCUM, copy=False)
    god = d_out.data.astype(ACCUM, copy=False)
    dq = np.zeros_like(qd)
    dk = np.zeros_like(kd)
    dv = np.zeros_like(vd)
    for sel, times, lo, hi in _attention_blocks(slot_tokens, keys.rows, seq_len):
        if sel.size == 0:
            continue
        kb = kd[lo:hi]
        vb = vd[lo:hi]
        mask = None
        if causal:
            mask = times[:, None] < np.arange(hi - lo)[None, :]
        for c0 in range(0, q.cols, d_head):
            c1 = c0 + d_head
            scores = (qd[sel, c0:c1] @ kb[:, c0:c1].T) * scale
            if mask is not None:
                scores = np.where(mask, -np.inf, scores)
            scores -= scores.max(axis=1, keepdims=True)
            probs = np.exp(scores)
            probs /= probs.sum(axis=1, keepdims=True)
            gout = god[sel, c0:c1]
            dprobs = gout @ vb[:, c0:c1].T
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=1, keepdims=True))
            dq[sel, c0:c1] = (dscores @ kb[:, c0:c1]) * scale
            dk[lo:hi, c0:c1] += (dscores.T @ qd[sel, c0:c1]) * scale
            dv[lo:hi, c0:c1] += probs.T @ gout
    return (
        Matrix(dq.astype(q.dtype)),
        Matrix(dk.astype(q.dtype)),
        Matrix(dv.astype(q.dtype)),
    )


@dataclass
class MomhaContext:
    query_ctx: pl.LinearContext
    output_ctx: pl.LinearContext
    x: Matrix
    q: Matrix
    keys: Matrix
    values: Matrix
    wk: Matrix
    wv: Matrix
    slot_tokens: np.ndarray
    seq_len: int
    d_head: int
    causal: bool


@dataclass
class MomhaGradients:
    dx: Matrix
    dwq: ExpertTensor
    dwk: Matrix
    dwv: Matrix
    dwo: ExpertTensor
    dp: np.ndarray


def momha_forward(
    x: Matrix,
    weights: MomhaWeights,
    routing: RoutingResult,
    order: GroupedOrder,
    config: MomhaConfig,
    seq_len: int,
    *,
    training: bool = True,
    tile: TileConfig | None = None,
    ledger: AllocationLedger | None = None,
) -> tuple[Matrix, MomhaContext | None]:
    """Routed attention over batch-time flattened tokens (x: B*T x d_model).

    Keys and values are dense; queries fan out through each token's selected
    experts in chronological slot order; the output projection is routed the
    same way and combined with the routing weights.
    """
    n = x.rows
    require_dims(x.cols == config.d_model, "input width", (x.rows, x.cols), (config.d_model,))
    if n % seq_len:
        raise ValueError(f"token count {n} is not divisible by seq_len {seq_len}")
    if routing.num_tokens != n or routing.k != config.k:
        raise ValueError(
            f"routing covers {routing.num_tokens} tokens with k={routing.k}; "
            f"expected {n} tokens with k={config.k}"
        )
    keys = matmul(x, weights.wk)
    values = matmul(x, weights.wv)
    if ledger:
        ledger.alloc("momha.keys", keys.rows, keys.cols, "forward")
        ledger.alloc("momha.values", values.rows, values.cols, "forward")
    q, query_ctx = pl.forward(
        x, weights.wq, order, p=None, fan_out=config.k, layout=SCATTERED_TO_SCATTERED,
        tile=tile, training=training, ledger=ledger, name="momha.query",
    )
    slot_tokens = np.arange(n * config.k, dtype=np.int64) // config.k
    attn_out = attention(q, keys, values, slot_tokens, seq_len, config.d_head, config.causal)
    if ledger:
        ledger.alloc("momha.attn_out", attn_out.rows, attn_out.cols, "forward")
    y, output_ctx = pl.forward(
        attn_out, weights.wo, order, p=routing.p, fan_out=1, layout=SCATTERED_TO_SCATTERED,
        tile=tile, training=training, ledger=ledger, name="momha.output",
    )
    if not training:
        return y, None
    ctx = MomhaContext(
        query_ctx=query_ctx, output_ctx=output_ctx, x=x, q=q, keys=keys, values=values,
        wk=weights.wk, wv=weights.wv, slot_tokens=slot_tokens, seq_len=seq_len,
        d_head=config.d_head, causal=config.causal,
    )
    return y, ctx


def momha_backward(
    ctx: MomhaContext,
    dy: Matrix,
    *,
    tile: TileConfig | None = None,
    ledger: AllocationLedger | None = None,
) -> MomhaGradients:
    """Gradients for routed attention; stops at dp like the MLP backward."""
    g_o = pl.backward(ctx.output_ctx, dy, tile=tile, ledger=ledger, name="momha.output")
    dq, dk, dv = attention_backward(
        ctx.q, ctx.keys, ctx.values, ctx.slot_tokens, ctx.seq_len,
        ctx.d_head, ctx.causal, g_o.dx,
    )
    g_q = pl.backward(ctx.query_ctx, dq, tile=tile, ledger=ledger, name="momha.query")
    x64 = ctx.x.data.astype(ACCUM, copy=False)
    dwk = Matrix((x64.T @ dk.data.astype(ACCUM, copy=False)).astype(ctx.x.dtype))
    dwv = Matrix((x64.T @ dv.data.astype(ACCUM, copy=False)).astype(ctx.x.dtype))
    dx_kv = (
        dk.data.astype(ACCUM, copy=False) @ ctx.wk.data.astype(ACCUM, copy=False).T
        + dv.data.astype(ACCUM, copy=False) @ ctx.wv.data.astype(ACCUM, copy=False).T
    )
    dx = Matrix((g_q.dx.data.astype(ACCUM, copy=False) + dx_kv).astype(ctx.x.dtype))
    return MomhaGradients(dx=dx, dwq=g_q.dw, dwk=dwk, dwv=dwv, dwo=g_o.dw, dp=g_o.dp)
