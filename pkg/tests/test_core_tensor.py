"""Matrix / expert-stack containers and the accumulating matmul."""

import numpy as np
import pytest

from scattermlp import (
    DimensionError,
    ExpertTensor,
    Matrix,
    matmul,
    seeded_random_expert_tensor,
    seeded_random_matrix,
)
from scattermlp.oracle import triple_loop_matmul


def test_matmul_matches_triple_loop():
    a = seeded_random_matrix(7, 5, 11)
    b = seeded_random_matrix(5, 3, 12)
    got = matmul(a, b)
    want = triple_loop_matmul(a, b)
    assert got.data.shape == (7, 3)
    np.testing.assert_allclose(got.data, want, rtol=1e-6, atol=1e-7)


def test_matmul_identity():
    a = seeded_random_matrix(6, 6, 3)
    eye = Matrix(np.eye(6, dtype=np.float32))
    assert np.array_equal(matmul(a, eye).data, a.data)


def test_matmul_accumulates_in_64_bit():
    # float32 running sums would cancel the +1 against the large terms
    big = np.float32(2.0**24)
    a = Matrix(np.array([[big, 1.0, -big]], dtype=np.float32))
    b = Matrix(np.ones((3, 1), dtype=np.float32))
    assert matmul(a, b).data[0, 0] == np.float32(1.0)


def test_matmul_out_buffer_reused():
    a = seeded_random_matrix(4, 5, 1)
    b = seeded_random_matrix(5, 2, 2)
    out = Matrix(np.zeros((4, 2), dtype=np.float32))
    result = matmul(a, b, out=out)
    assert result is out
    np.testing.assert_array_equal(result.data, matmul(a, b).data)


def test_matmul_shape_mismatch():
    a = seeded_random_matrix(4, 5, 1)
    b = seeded_random_matrix(6, 2, 2)
    with pytest.raises(DimensionError):
        matmul(a, b)


def test_seeded_matrix_deterministic():
    a = seeded_random_matrix(8, 8, 42)
    b = seeded_random_matrix(8, 8, 42)
    c = seeded_random_matrix(8, 8, 43)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert a.dtype == np.float32
    assert float(np.abs(a.data).max()) <= 1.0


def test_logical_bytes_are_four_per_element():
    assert Matrix(np.zeros((5, 7), dtype=np.float32)).logical_bytes == 5 * 7 * 4
    # verification runs in float64 still account the deployed width
    assert Matrix(np.zeros((5, 7), dtype=np.float64)).logical_bytes == 5 * 7 * 4


def test_expert_tensor_views():
    w = seeded_random_expert_tensor(3, 4, 5, 9)
    assert (w.num_experts, w.d_in, w.d_out) == (3, 4, 5)
    view = w.expert(1)
    assert view.shape == (4, 5)
    assert np.shares_memory(view, w.data)
    assert np.array_equal(view, w.data[1])


def test_expert_tensor_seeded_determinism():
    a = seeded_random_expert_tensor(2, 3, 4, 7)
    b = seeded_random_expert_tensor(2, 3, 4, 7)
    assert np.array_equal(a.data, b.data)


def test_matrix_copy_is_independent():
    a = seeded_random_matrix(3, 3, 5)
    b = a.copy()
    b.data[0, 0] += 1.0
    assert a.data[0, 0] != b.data[0, 0]
