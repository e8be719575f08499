"""Top-k gating and the grouped execution order.

A token's row of gate logits becomes softmax probabilities; the k largest
are selected (ties go to the lower expert index) and by default
renormalized to sum to one. Routing is then flattened to T*k scattered
slots (slot s belongs to token s // k, selection s % k) and stably sorted
by expert id, which yields the grouped order every kernel in this package
consumes: a permutation o of the slots plus per-expert bin offsets. There
is no capacity limit and no token dropping; empty bins are legal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_tensor import ACCUM, Matrix
from .errors import require_dims


@dataclass(frozen=True, eq=False)
class RoutingResult:
    """Selected experts and their combine weights for each token.

    expert_idx: (T, k) int array, distinct ids per row, sorted by gate value
        (descending, ties toward the lower index).
    p: (T, k) combine weights aligned with expert_idx.
    gate_full: (T, E) full softmax gate probabilities.
    renormalized: whether p rows were rescaled to sum to one.
    """

    expert_idx: np.ndarray
    p: np.ndarray
    gate_full: np.ndarray
    renormalized: bool = True

    def __post_init__(self):
        require_dims(self.expert_idx.shape == self.p.shape, "expert_idx vs p", self.expert_idx.shape, self.p.shape)
        require_dims(
            self.gate_full.shape[0] == self.expert_idx.shape[0],
            "gate rows vs routed rows",
            self.gate_full.shape,
            self.expert_idx.shape,
        )
        t, k = self.expert_idx.shape
        e = self.gate_full.shape[1]
        if k < 1 or k > e:
            raise ValueError(f"k must be in [1, E]; got k={k}, E={e}")
        if self.expert_idx.size and (self.expert_idx.min() < 0 or self.expert_idx.max() >= e):
            raise ValueError(f"expert ids must lie in [0, {e}); got range "
                             f"[{self.expert_idx.min()}, {self.expert_idx.max()}]")
        for row in range(t):
            ids = self.expert_idx[row]
            if len(set(ids.tolist())) != k:
                raise ValueError(f"duplicate expert id in row {row}: {ids.tolist()}")
        if self.renormalized and t:
            sums = self.p.sum(axis=1, dtype=ACCUM)
            if not np.allclose(sums, 1.0, atol=1e-6):
                raise ValueError("renormalized combine weights must sum to 1 per row")

    @property
    def num_tokens(self) -> int:
        return self.expert_idx.shape[0]

    @property
    def k(self) -> int:
        return self.expert_idx.shape[1]

    @property
    def num_experts(self) -> int:
        return self.gate_full.shape[1]

    @property
    def p_flat(self) -> np.ndarray:
        """Combine weights indexed by scattered slot (token-major)."""
        return self.p.reshape(-1)


@dataclass(frozen=True, eq=False)
class GroupedOrder:
    """Stable grouping of the T*k scattered slots by expert id.

    o[i] is the scattered slot held at grouped position i. Positions
    [bin_offsets[e], bin_offsets[e+1]) form expert e's bin; within a bin the
    scattered indices are strictly increasing (the sort is stable).
    """

    o: np.ndarray
    bin_offsets: np.ndarray

    def __post_init__(self):
        if self.bin_offsets.ndim != 1 or self.bin_offsets.size < 2:
            raise ValueError("bin_offsets must hold E+1 entries")
        if self.bin_offsets[0] != 0 or self.bin_offsets[-1] != self.o.size:
            raise ValueError("bin_offsets must start at 0 and end at T*k")
        if np.any(np.diff(self.bin_offsets) < 0):
            raise ValueError("bin_offsets must be non-decreasing")

    @property
    def num_slots(self) -> int:
        return self.o.size

    @property
    def num_experts(self) -> int:
        return self.bin_offsets.size - 1

    @property
    def bin_counts(self) -> np.ndarray:
        return np.diff(self.bin_offsets)

    def inverse(self) -> np.ndarray:
        """Map scattered slot -> grouped position (inverse permutation of o)."""
        inv = np.empty_like(self.o)
        inv[self.o] = np.arange(self.o.size, dtype=self.o.dtype)
        return inv


def gate_forward(x: Matrix, w_g: Matrix) -> Matrix:
    """Row-wise softmax of x @ w_g; each row sums to one."""
    require_dims(x.cols == w_g.rows, "gate matmul", (x.rows, x.cols), (w_g.rows, w_g.cols))
    logits = x.data.astype(ACCUM, copy=False) @ w_g.data.astype(ACCUM, copy=False)
    return Matrix(_softmax_rows(logits).astype(x.dtype))


def softmax_rows(logits: Matrix) -> Matrix:
    """Stable row softmax of pre-computed logits."""
    return Matrix(_softmax_rows(logits.data.astype(ACCUM, copy=False)).astype(logits.dtype))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def topk_select(gate: Matrix, k: int, renormalize: bool = True) -> RoutingResult:
    """Pick each row's k largest gates; ties break toward the lower expert id."""
    t, e = gate.rows, gate.cols
    if not 1 <= k <= e:
        raise ValueError(f"k must be in [1, E]; got k={k}, E={e}")
    g = gate.data
    # Stable sort on descending value: equal gates keep ascending expert index.
    order = np.argsort(-g, axis=1, kind="stable")
    idx = order[:, :k].astype(np.int64)
    sel = np.take_along_axis(g, idx, axis=1)
    if renormalize:
        p = (sel.astype(ACCUM) / sel.sum(axis=1, keepdims=True, dtype=ACCUM)).astype(g.dtype)
    else:
        p = sel.copy()
    return RoutingResult(expert_idx=idx, p=p, gate_full=g, renormalized=renormalize)


def compute_grouped_order(routing: RoutingResult, num_experts: int | None = None) -> GroupedOrder:
    """Group the T*k scattered slots by expert id, stable by slot index."""
    e = routing.num_experts if num_experts is None else num_experts
    if e < routing.num_experts:
        raise ValueError(f"num_experts={e} smaller than routed id space {routing.num_experts}")
    flat = routing.expert_idx.reshape(-1)
    o = np.argsort(flat, kind="stable").astype(np.int64)
    counts = np.bincount(flat, minlength=e).astype(np.int64)
    offsets = np.zeros(e + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return GroupedOrder(o=o, bin_offsets=offsets)


def gate_backward(routing: RoutingResult, grad_p: np.ndarray) -> Matrix:
    """Gradient of a loss wrt the gate logits, given the gradient wrt p.

    Chains the renormalization Jacobian (when it was applied), the scatter of
    selected entries into the full gate row, and the softmax Jacobian. The
    top-k selection itself is locally constant and contributes no term.
    """
    require_dims(grad_p.shape == routing.p.shape, "grad_p vs p", grad_p.shape, routing.p.shape)
    g = routing.gate_full.astype(ACCUM, copy=False)
    dp = grad_p.astype(ACCUM, copy=False)
    sel = routing.expert_idx
    gsel = np.take_along_axis(g, sel, axis=1)
    if routing.renormalized:
        s = gsel.sum(axis=1, keepdims=True)
        p = gsel / s
        dgsel = (dp - (dp * p).sum(axis=1, keepdims=True)) / s
    else:
        dgsel = dp
    dg = np.zeros_like(g)
    np.put_along_axis(dg, sel, dgsel, axis=1)
    dz = g * (dg - (dg * g).sum(axis=1, keepdims=True))
    return Matrix(dz.astype(routing.gate_full.dtype))


def assignment_routing(
    expert_idx: np.ndarray,
    num_experts: int,
    p: np.ndarray | None = None,
    dtype=np.float32,
) -> RoutingResult:
    """Build a RoutingResult from explicit assignments (tests and benches).

    The synthetic gate matrix scatters p into the selected columns so the
    usual invariants (rows sum to one, p = renormalized selected gates) hold.
    """
    idx = np.asarray(expert_idx, dtype=np.int64)
    if idx.ndim != 2:
        raise ValueError(f"expert_idx must be (T, k), got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_experts):
        raise ValueError(f"expert ids must lie in [0, {num_experts}); got range "
                         f"[{idx.min()}, {idx.max()}]")
    t, k = idx.shape
    if p is None:
        p = np.full((t, k), 1.0 / k, dtype=dtype)
    else:
        p = np.asarray(p, dtype=dtype)
        sums = p.sum(axis=1, keepdims=True, dtype=ACCUM)
        if not np.allclose(sums, 1.0, atol=1e-6):
            p = (p.astype(ACCUM) / sums).astype(dtype)
    gate = np.zeros((t, num_experts), dtype=dtype)
    np.put_along_axis(gate, idx, p, axis=1)
    return RoutingResult(expert_idx=idx, p=p, gate_full=gate, renormalized=True)
