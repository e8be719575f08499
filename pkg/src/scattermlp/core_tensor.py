"""Dense tensor plumbing: row-major matrices and per-expert weight stacks.

Storage is 32-bit float by default (64-bit is accepted for verification
work). Every dot-product style reduction in the package accumulates in
64-bit and rounds once to the storage precision, so tiled and naive
evaluation orders agree tightly.

Matrices are treated as immutable: no operation mutates its inputs except
through an explicit ``out`` parameter, and tests enforce this.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, require_dims

FLOAT = np.float32
ACCUM = np.float64

_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_2d(data, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


class Matrix:
    """A 2-D row-major matrix of float32 (or float64) entries."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _ALLOWED_DTYPES else FLOAT
        if np.dtype(dtype) not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported element type {dtype}; use float32 or float64")
        self.data = _as_2d(data, dtype)

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype=FLOAT) -> "Matrix":
        if rows < 0 or cols < 0:
            raise ValueError(f"matrix dimensions must be non-negative, got {rows}x{cols}")
        return cls(np.zeros((rows, cols), dtype=dtype))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def logical_bytes(self) -> int:
        # Accounting is defined over the default 4-byte element regardless of
        # the dtype a verification run happens to use.
        return self.rows * self.cols * 4

    def copy(self) -> "Matrix":
        return Matrix(self.data.copy())

    def astype(self, dtype) -> "Matrix":
        return Matrix(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, {self.data.dtype})"


class WeightMatrix(Matrix):
    """A dense parameter matrix mapping d_in -> d_out."""

    @property
    def d_in(self) -> int:
        return self.rows

    @property
    def d_out(self) -> int:
        return self.cols


class ExpertTensor:
    """A stack of E weight matrices, one d_in x d_out block per expert."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _ALLOWED_DTYPES else FLOAT
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim != 3:
            raise DimensionError(f"expected a 3-D expert stack, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("an expert stack needs at least one expert")
        self.data = arr

    @classmethod
    def zeros(cls, num_experts: int, d_in: int, d_out: int, dtype=FLOAT) -> "ExpertTensor":
        return cls(np.zeros((num_experts, d_in, d_out), dtype=dtype))

    @property
    def num_experts(self) -> int:
        return self.data.shape[0]

    @property
    def d_in(self) -> int:
        return self.data.shape[1]

    @property
    def d_out(self) -> int:
        return self.data.shape[2]

    @property
    def dtype(self):
        return self.data.dtype

    def expert(self, e: int) -> np.ndarray:
        """View of expert e's weight block (no copy)."""
        if not 0 <= e < self.num_experts:
            raise ValueError(f"expert index {e} out of range [0, {self.num_experts})")
        return self.data[e]

    def __repr__(self) -> str:
        return f"ExpertTensor({self.num_experts}x{self.d_in}x{self.d_out}, {self.data.dtype})"


def matmul(a: Matrix, b: Matrix, out: Matrix | None = None) -> Matrix:
    """a @ b with 64-bit accumulation, rounded once to the storage dtype."""
    require_dims(a.cols == b.rows, "matmul inner dimensions", (a.rows, a.cols), (b.rows, b.cols))
    if a.dtype != b.dtype:
        raise ValueError(f"matmul operands must share a dtype, got {a.dtype} and {b.dtype}")
    acc = a.data.astype(ACCUM, copy=False) @ b.data.astype(ACCUM, copy=False)
    result = acc.astype(a.dtype, copy=False)
    if out is None:
        return Matrix(np.ascontiguousarray(result))
    require_dims(
        out.rows == a.rows and out.cols == b.cols,
        "matmul out buffer",
        (out.rows, out.cols),
        (a.rows, b.cols),
    )
    out.data[...] = result
    return out


def seeded_random_matrix(rows: int, cols: int, seed: int, scale: float = 1.0, dtype=FLOAT) -> Matrix:
    """Uniform [-scale, scale] entries from a PCG64 stream; same seed, same bytes."""
    if scale < 0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return Matrix(rng.uniform(-scale, scale, size=(rows, cols)).astype(dtype))


def seeded_random_expert_tensor(
    num_experts: int, d_in: int, d_out: int, seed: int, scale: float = 1.0, dtype=FLOAT
) -> ExpertTensor:
    """Per-expert weight stack drawn from one seeded PCG64 stream."""
    if scale < 0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return ExpertTensor(rng.uniform(-scale, scale, size=(num_experts, d_in, d_out)).astype(dtype))
