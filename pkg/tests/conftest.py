"""Shared test helpers: seeded routing cases, including adversarial shapes."""

import numpy as np
import pytest

from scattermlp import TileConfig, assignment_routing, softmax_rows, topk_select
from scattermlp.core_tensor import Matrix

FLAVORS = ("gate", "all_to_one", "skip_one")


def routing_case(rng, t, k, e, flavor="gate"):
    """A valid RoutingResult for t tokens over e experts, k per token.

    gate draws realistic softmax routing; all_to_one sends every token to
    the same k experts (maximally skewed bins); skip_one never selects the
    last expert (guarantees an empty bin).
    """
    if flavor == "all_to_one":
        idx = np.tile(np.arange(k, dtype=np.int64), (t, 1))
    elif flavor == "skip_one" and e > k:
        idx = np.stack([rng.permutation(e - 1)[:k] for _ in range(t)]).astype(np.int64)
    else:
        logits = Matrix(rng.standard_normal((t, e)).astype(np.float32))
        return topk_select(softmax_rows(logits), k)
    p = rng.random((t, k)).astype(np.float32) + 0.1
    return assignment_routing(idx, e, p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_tile():
    """Tiny tiles and two workers so small tests still cross tile edges."""
    return TileConfig(tile_rows=4, tile_cols=8, tile_inner=8, worker_count=2)
