"""Fused gather/transform/scatter kernels against the row-at-a-time oracle."""

import numpy as np
import pytest

from scattermlp import (
    GROUPED_TO_GROUPED,
    GROUPED_TO_SCATTERED,
    SCATTERED_TO_GROUPED,
    SCATTERED_TO_SCATTERED,
    ExpertTensor,
    Matrix,
    TileConfig,
    compute_grouped_order,
    group,
    group_xty,
    mac_count,
    reset_mac_count,
    scatter2scatter,
    scatter_combine,
    set_fault_injection,
)
from scattermlp.oracle import naive_scatter2scatter

from conftest import FLAVORS, routing_case

LAYOUTS = (SCATTERED_TO_GROUPED, GROUPED_TO_SCATTERED,
           SCATTERED_TO_SCATTERED, GROUPED_TO_GROUPED)


def _problem(rng, t, k, e, d_in, d_out, layout, flavor="gate", transpose=False):
    routing = routing_case(rng, t, k, e, flavor)
    order = compute_grouped_order(routing, num_experts=e)
    rows = t * k if layout.grouped_in else t
    fan_out = 1 if layout.grouped_in else k
    x = Matrix(rng.uniform(-1, 1, (rows, d_in)).astype(np.float32))
    shape = (e, d_out, d_in) if transpose else (e, d_in, d_out)
    w = ExpertTensor((rng.uniform(-1, 1, shape) / np.sqrt(d_in)).astype(np.float32))
    return x, w, order, fan_out, routing


def test_identity_experts_gather():
    """With identity weights the kernel is exactly the grouping gather."""
    routing = routing_case(np.random.default_rng(0), 9, 2, 4)
    order = compute_grouped_order(routing, num_experts=4)
    x = Matrix(np.arange(9 * 3, dtype=np.float32).reshape(9, 3))
    w = ExpertTensor(np.tile(np.eye(3, dtype=np.float32), (4, 1, 1)))
    y = scatter2scatter(x, w, order, 2, SCATTERED_TO_GROUPED)
    assert np.array_equal(y.data, x.data[order.o // 2])


@pytest.mark.parametrize("layout", LAYOUTS)
@pytest.mark.parametrize("transpose", [False, True])
@pytest.mark.parametrize("flavor", FLAVORS)
def test_matches_naive_oracle(rng, layout, transpose, flavor):
    for trial in range(6):
        t = int(rng.integers(1, 30))
        e = int(rng.integers(2, 7))
        k = int(rng.integers(1, 3))
        d_in = int(rng.integers(1, 20))
        d_out = int(rng.integers(1, 20))
        x, w, order, fan_out, _ = _problem(
            rng, t, k, e, d_in, d_out, layout, flavor, transpose)
        got = scatter2scatter(x, w, order, fan_out, layout, transpose_w=transpose)
        want = naive_scatter2scatter(x, w, order, fan_out, layout, transpose_w=transpose)
        np.testing.assert_allclose(got.data, want, rtol=1e-5, atol=1e-7)


def test_single_token_single_expert(rng):
    x, w, order, fan_out, _ = _problem(rng, 1, 1, 1, 4, 3, SCATTERED_TO_GROUPED)
    got = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED)
    np.testing.assert_allclose(
        got.data, naive_scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED),
        rtol=1e-5, atol=1e-7)


def test_wide_dims_cross_tile_edges(rng, small_tile):
    x, w, order, fan_out, _ = _problem(rng, 40, 2, 3, 37, 29, SCATTERED_TO_SCATTERED)
    got = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_SCATTERED, tile=small_tile)
    want = naive_scatter2scatter(x, w, order, fan_out, SCATTERED_TO_SCATTERED)
    np.testing.assert_allclose(got.data, want, rtol=1e-5, atol=1e-7)


def test_row_and_worker_tiling_is_bit_identical(rng):
    """Each output row lives in one tile, so row/col/worker splits are exact."""
    x, w, order, fan_out, _ = _problem(rng, 50, 2, 5, 24, 18, SCATTERED_TO_GROUPED)
    base = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED,
                           tile=TileConfig(64, 64, 64, worker_count=1))
    for tile in (TileConfig(3, 64, 64, worker_count=1),
                 TileConfig(7, 5, 64, worker_count=1),
                 TileConfig(16, 64, 64, worker_count=4),
                 TileConfig(3, 5, 64, worker_count=3)):
        other = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED, tile=tile)
        assert np.array_equal(base.data, other.data)


def test_inner_tiling_stays_within_tolerance(rng):
    # splitting the reduction reorders 64-bit accumulation; output is f32
    x, w, order, fan_out, _ = _problem(rng, 30, 2, 4, 40, 12, SCATTERED_TO_GROUPED)
    base = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED,
                           tile=TileConfig(64, 64, 64, worker_count=1))
    split = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED,
                            tile=TileConfig(64, 64, 8, worker_count=1))
    np.testing.assert_allclose(base.data, split.data, rtol=1e-6, atol=1e-7)


def test_out_buffer_reuse_is_bit_identical(rng):
    x, w, order, fan_out, _ = _problem(rng, 22, 2, 4, 9, 11, GROUPED_TO_SCATTERED)
    xg = Matrix(rng.uniform(-1, 1, (44, 9)).astype(np.float32))
    fresh = scatter2scatter(xg, w, order, 1, GROUPED_TO_SCATTERED)
    out = Matrix(np.full((44, 11), np.nan, dtype=np.float32))
    reused = scatter2scatter(xg, w, order, 1, GROUPED_TO_SCATTERED, out=out)
    assert reused is out
    assert np.array_equal(fresh.data, reused.data)


def test_group_gathers_rows(rng):
    routing = routing_case(rng, 11, 2, 4)
    order = compute_grouped_order(routing, num_experts=4)
    x = Matrix(rng.uniform(-1, 1, (11, 5)).astype(np.float32))
    grouped = group(x, order, fan_out=2)
    assert np.array_equal(grouped.data, x.data[order.o // 2])


def test_group_applies_slot_weights(rng):
    routing = routing_case(rng, 8, 2, 3)
    order = compute_grouped_order(routing, num_experts=3)
    x = Matrix(rng.uniform(-1, 1, (16, 4)).astype(np.float32))
    weights = rng.uniform(0.5, 1.5, 16).astype(np.float32)
    grouped = group(x, order, weights=weights, fan_out=1)
    want = x.data[order.o] * weights[order.o][:, None]
    np.testing.assert_allclose(grouped.data, want, rtol=1e-6, atol=0)


def test_group_xty_per_bin_products(rng):
    routing = routing_case(rng, 14, 2, 4)
    order = compute_grouped_order(routing, num_experts=4)
    xg = Matrix(rng.uniform(-1, 1, (28, 6)).astype(np.float32))
    yg = Matrix(rng.uniform(-1, 1, (28, 5)).astype(np.float32))
    got = group_xty(xg, yg, order)
    for e in range(4):
        lo, hi = int(order.bin_offsets[e]), int(order.bin_offsets[e + 1])
        want = xg.data[lo:hi].astype(np.float64).T @ yg.data[lo:hi].astype(np.float64)
        np.testing.assert_allclose(got.data[e], want, rtol=1e-6, atol=1e-7)


def test_group_xty_empty_bin_is_zero(rng):
    routing = routing_case(rng, 10, 1, 5, "skip_one")
    order = compute_grouped_order(routing, num_experts=5)
    xg = Matrix(rng.uniform(-1, 1, (10, 3)).astype(np.float32))
    yg = Matrix(rng.uniform(-1, 1, (10, 2)).astype(np.float32))
    got = group_xty(xg, yg, order)
    assert np.all(got.data[4] == 0.0)


def test_scatter_combine_equals_transform_then_weighted_sum(rng):
    t, k, e, d_in, d_out = 13, 3, 5, 7, 6
    routing = routing_case(rng, t, k, e)
    order = compute_grouped_order(routing, num_experts=e)
    xg = Matrix(rng.uniform(-1, 1, (t * k, d_in)).astype(np.float32))
    w = ExpertTensor((rng.uniform(-1, 1, (e, d_in, d_out)) / np.sqrt(d_in)).astype(np.float32))
    y = scatter_combine(xg, w, order, 1, routing.p_flat, k, grouped_in=True)
    y_hat = naive_scatter2scatter(xg, w, order, 1, GROUPED_TO_SCATTERED)
    want = (routing.p.astype(np.float64)[:, :, None]
            * y_hat.reshape(t, k, d_out)).sum(axis=1)
    np.testing.assert_allclose(y.data, want, rtol=1e-5, atol=1e-7)


def test_mac_count_uniform_routing(rng):
    idx = (np.arange(16, dtype=np.int64) % 4).reshape(16, 1)
    from scattermlp import assignment_routing
    routing = assignment_routing(idx, 4)
    order = compute_grouped_order(routing, num_experts=4)
    x = Matrix(rng.uniform(-1, 1, (16, 7)).astype(np.float32))
    w = ExpertTensor(rng.uniform(-1, 1, (4, 7, 9)).astype(np.float32))
    reset_mac_count()
    scatter2scatter(x, w, order, 1, SCATTERED_TO_GROUPED)
    assert mac_count() == 16 * 7 * 9


def test_mac_count_skewed_routing_counts_no_padding(rng):
    from scattermlp import assignment_routing
    routing = assignment_routing(np.zeros((16, 1), dtype=np.int64), 4)
    order = compute_grouped_order(routing, num_experts=4)
    x = Matrix(rng.uniform(-1, 1, (16, 7)).astype(np.float32))
    w = ExpertTensor(rng.uniform(-1, 1, (4, 7, 9)).astype(np.float32))
    reset_mac_count()
    scatter2scatter(x, w, order, 1, SCATTERED_TO_GROUPED)
    # all sixteen rows land in one bin; empty bins cost nothing
    assert mac_count() == 16 * 7 * 9


def test_mac_count_accumulates_across_calls(rng):
    x, w, order, fan_out, _ = _problem(rng, 6, 2, 3, 4, 5, SCATTERED_TO_GROUPED)
    reset_mac_count()
    scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED)
    scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED)
    assert mac_count() == 2 * 12 * 4 * 5


def test_fault_injection_hook_perturbs_output(rng):
    x, w, order, fan_out, _ = _problem(rng, 5, 1, 2, 3, 3, SCATTERED_TO_GROUPED)
    clean = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED)
    set_fault_injection(True)
    try:
        dirty = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED)
    finally:
        set_fault_injection(False)
    assert not np.array_equal(clean.data, dirty.data)
    after = scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED)
    assert np.array_equal(clean.data, after.data)


def test_rejects_wrong_row_counts(rng):
    x, w, order, fan_out, _ = _problem(rng, 10, 2, 3, 4, 5, SCATTERED_TO_GROUPED)
    bad = Matrix(np.zeros((7, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        scatter2scatter(bad, w, order, fan_out, SCATTERED_TO_GROUPED)


def test_rejects_mismatched_out_buffer(rng):
    x, w, order, fan_out, _ = _problem(rng, 10, 2, 3, 4, 5, SCATTERED_TO_GROUPED)
    out = Matrix(np.zeros((20, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        scatter2scatter(x, w, order, fan_out, SCATTERED_TO_GROUPED, out=out)


def test_worker_count_env_var_sets_default(monkeypatch):
    monkeypatch.setenv("SCATTERMLP_WORKERS", "3")
    assert TileConfig().worker_count == 3
    monkeypatch.setenv("SCATTERMLP_WORKERS", "0")
    with pytest.raises(ValueError):
        TileConfig()


def test_tile_config_rejects_nonpositive_tiles():
    with pytest.raises(ValueError):
        TileConfig(tile_rows=0)
