"""Expert-routed linear transform with optional weighted slot combine.

Forward: Y_hat = scatter2scatter(X, W, o, fan_out); when combine weights p
(S x j with S*j = T*k) are supplied, Y[s] = sum_i p[s, i] * Y_hat[s*j + i].
In training the pre-combine Y_hat is retained (the backward needs it for
dp); in inference the combine is fused into the kernel write and no T*k
pre-combine buffer ever exists.

Backward follows the reuse discipline: dp is computed first, after which
Y_hat's storage is reused for the grouped incoming gradient; the grouped
copy of X is reused for the slot input-gradients once the weight gradient
has consumed it. With both scratch slots pre-seeded the backward allocates
no new T*k-row matrix at all; without them it allocates at most two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .accounting import AllocationLedger
from .core_tensor import ACCUM, ExpertTensor, Matrix
from .errors import require_dims
from .kernels import (
    GROUPED_TO_GROUPED,
    GROUPED_TO_SCATTERED,
    SCATTERED_TO_SCATTERED,
    LayoutFlag,
    TileConfig,
    group,
    group_xty,
    scatter2scatter,
    scatter_combine,
)
from .router import GroupedOrder


@dataclass
class LinearContext:
    """Everything the backward consumes: X, Y_hat, the order, and p.

    No grouped copy of X is stored. The scratch slots, when seeded, receive
    the grouped incoming gradient and the grouped X (and are then reused for
    the slot input-gradients); they must not alias each other or the saved
    activations they would be gathered from.
    """

    x: Matrix
    w: ExpertTensor
    order: GroupedOrder
    p: np.ndarray | None
    fan_out: int
    x_was_grouped: bool
    y_was_grouped: bool
    y_hat: Matrix | None
    scratch_grouped_dy: Matrix | None = None
    scratch_grouped_x: Matrix | None = None
    consumed: bool = False


@dataclass
class LinearGradients:
    dx: Matrix
    dw: ExpertTensor
    dp: np.ndarray | None


def _combine(p: np.ndarray, y_hat: Matrix) -> Matrix:
    s, j = p.shape
    view = y_hat.data.reshape(s, j, y_hat.cols)
    acc = np.einsum("sj,sjd->sd", p.astype(ACCUM, copy=False), view.astype(ACCUM, copy=False))
    return Matrix(acc.astype(y_hat.dtype))


def _validate_p(p: np.ndarray, num_slots: int) -> None:
    if p.ndim != 2:
        raise ValueError(f"combine weights must be 2-D (S, j), got shape {p.shape}")
    if p.shape[0] * p.shape[1] != num_slots:
        raise ValueError(
            f"combine weights {p.shape} must cover T*k = {num_slots} slots exactly"
        )


def forward(
    x: Matrix,
    w: ExpertTensor,
    order: GroupedOrder,
    p: np.ndarray | None = None,
    fan_out: int = 1,
    layout: LayoutFlag = SCATTERED_TO_SCATTERED,
    *,
    tile: TileConfig | None = None,
    training: bool = True,
    ledger: AllocationLedger | None = None,
    name: str = "parallel_linear",
) -> tuple[Matrix, LinearContext | None]:
    """Apply the routed transform; returns (Y, ctx), ctx None in inference.

    Y has S rows when p is given (the combine output), else T*k rows in the
    layout requested by layout.grouped_out.
    """
    num_slots = order.num_slots
    if p is None:
        y_hat = scatter2scatter(x, w, order, fan_out, layout, tile)
        if ledger:
            ledger.alloc(f"{name}.y", y_hat.rows, y_hat.cols, "forward")
        if not training:
            return y_hat, None
        ctx = LinearContext(
            x=x, w=w, order=order, p=None, fan_out=fan_out,
            x_was_grouped=layout.grouped_in, y_was_grouped=layout.grouped_out,
            y_hat=y_hat,
        )
        return y_hat, ctx

    _validate_p(p, num_slots)
    if layout.grouped_out:
        raise ValueError("combine weights require scattered kernel output (grouped_out=False)")
    if not training:
        y = scatter_combine(
            x, w, order, fan_out, p.reshape(-1), p.shape[1], layout.grouped_in, tile
        )
        if ledger:
            ledger.alloc(f"{name}.y", y.rows, y.cols, "forward")
        return y, None

    y_hat = scatter2scatter(x, w, order, fan_out, LayoutFlag(layout.grouped_in, False), tile)
    if ledger:
        # Retained purely for the backward (dp and gradient scratch reuse);
        # the inference path never allocates it.
        ledger.alloc(f"{name}.y_hat", y_hat.rows, y_hat.cols, "backward")
    y = _combine(p, y_hat)
    if ledger:
        ledger.alloc(f"{name}.y", y.rows, y.cols, "forward")
    ctx = LinearContext(
        x=x, w=w, order=order, p=p, fan_out=fan_out,
        x_was_grouped=layout.grouped_in, y_was_grouped=False,
        y_hat=y_hat,
    )
    return y, ctx


def _check_scratch(slot: Matrix | None, rows: int, cols: int, dtype, label: str) -> None:
    if slot is None:
        return
    require_dims(
        slot.rows == rows and slot.cols == cols,
        f"{label} scratch shape",
        (slot.rows, slot.cols),
        (rows, cols),
    )
    if slot.dtype != dtype:
        raise ValueError(f"{label} scratch dtype {slot.dtype} does not match {dtype}")


def backward(
    ctx: LinearContext,
    dy: Matrix,
    *,
    tile: TileConfig | None = None,
    ledger: AllocationLedger | None = None,
    name: str = "parallel_linear",
) -> LinearGradients:
    """Gradients wrt X, W, and p. Consumes ctx (one backward per forward).

    dx comes back in the forward input's layout: T rows (slot gradients
    summed per token) for a scattered fan-out input, T*k rows for a grouped
    input. With a pre-seeded scratch_grouped_x and fan_out 1, dx aliases
    that scratch storage.
    """
    if ctx.consumed:
        raise RuntimeError("backward already consumed this context")
    order = ctx.order
    num_slots = order.num_slots
    d_in = ctx.x.cols
    d_out = ctx.w.d_out
    if ctx.p is not None:
        s, j = ctx.p.shape
        require_dims(dy.rows == s and dy.cols == d_out, "dy vs combine output", (dy.rows, dy.cols), (s, d_out))
    else:
        require_dims(dy.rows == num_slots and dy.cols == d_out, "dy vs transform output", (dy.rows, dy.cols), (num_slots, d_out))
    if dy.dtype != ctx.x.dtype:
        raise ValueError(f"dy dtype {dy.dtype} does not match forward dtype {ctx.x.dtype}")

    scratch_dy = ctx.scratch_grouped_dy
    scratch_x = ctx.scratch_grouped_x
    _check_scratch(scratch_dy, num_slots, d_out, ctx.x.dtype, "grouped-dy")
    _check_scratch(scratch_x, num_slots, d_in, ctx.x.dtype, "grouped-x")
    if scratch_dy is not None:
        if scratch_x is not None and np.shares_memory(scratch_dy.data, scratch_x.data):
            raise RuntimeError("scratch slots must not alias each other")
        if np.shares_memory(scratch_dy.data, dy.data):
            raise RuntimeError("grouped-dy scratch must not alias the incoming gradient")
    if scratch_x is not None and not ctx.x_was_grouped and np.shares_memory(scratch_x.data, ctx.x.data):
        raise RuntimeError("grouped-x scratch must not alias the saved input")

    # dp first: the combine gradient reads Y_hat before its storage is reused.
    dp = None
    if ctx.p is not None:
        view = ctx.y_hat.data.reshape(s, j, d_out)
        dp = np.einsum(
            "sd,sjd->sj", dy.data.astype(ACCUM, copy=False), view.astype(ACCUM, copy=False)
        ).astype(ctx.p.dtype)
        if ledger:
            ledger.alloc(f"{name}.dp", s, j, "backward")

    # Grouped incoming gradient (the blue array of the reuse discipline).
    if ctx.p is not None:
        if np.shares_memory(ctx.y_hat.data, dy.data):
            raise RuntimeError("dy must not alias the retained y_hat")
        dest = scratch_dy if scratch_dy is not None else ctx.y_hat
        grouped_dy = group(dy, order, weights=ctx.p.reshape(-1), fan_out=j, out=dest)
    elif ctx.y_was_grouped:
        grouped_dy = dy  # already in bin order; pure layout no-op
    else:
        if scratch_dy is not None:
            grouped_dy = group(dy, order, fan_out=1, out=scratch_dy)
        else:
            grouped_dy = group(dy, order, fan_out=1)
            if ledger:
                ledger.alloc(f"{name}.grouped_dy", num_slots, d_out, "backward")

    # Grouped input (the orange array): skipped entirely for grouped X.
    if ctx.x_was_grouped:
        xbar = ctx.x
    elif scratch_x is not None:
        xbar = group(ctx.x, order, fan_out=ctx.fan_out, out=scratch_x)
    else:
        xbar = group(ctx.x, order, fan_out=ctx.fan_out)
        if ledger:
            ledger.alloc(f"{name}.grouped_x", num_slots, d_in, "backward")

    dw = group_xty(xbar, grouped_dy, order, tile)
    if ledger:
        ledger.alloc(f"{name}.dw", ctx.w.num_experts * d_in, d_out, "backward")

    # Input gradients: W read with swapped index roles, never transposed in
    # memory. xbar has been consumed by group_xty, so its storage takes the
    # slot gradients (grouped X case: the scratch slot, if any, takes them -
    # ctx.x itself is never written).
    if ctx.x_was_grouped:
        if scratch_x is not None:
            dx = scatter2scatter(
                grouped_dy, ctx.w, order, 1, GROUPED_TO_GROUPED, tile,
                transpose_w=True, out=scratch_x,
            )
        else:
            dx = scatter2scatter(
                grouped_dy, ctx.w, order, 1, GROUPED_TO_GROUPED, tile, transpose_w=True
            )
            if ledger:
                ledger.alloc(f"{name}.dx", num_slots, d_in, "backward")
    else:
        slot_grads = scatter2scatter(
            grouped_dy, ctx.w, order, 1, GROUPED_TO_SCATTERED, tile,
            transpose_w=True, out=xbar,
        )
        if ctx.fan_out == 1:
            dx = slot_grads
        else:
            t = num_slots // ctx.fan_out
            reduced = slot_grads.data.reshape(t, ctx.fan_out, d_in).sum(axis=1, dtype=ACCUM)
            dx = Matrix(reduced.astype(ctx.x.dtype))
            if ledger:
                ledger.alloc(f"{name}.dx", t, d_in, "backward")

    ctx.consumed = True
    return LinearGradients(dx=dx, dw=dw, dp=dp)
