"""Dense matrix kernel.

Matrices and vectors are plain ``numpy`` arrays (2-D and 1-D). The helpers
here add the shape checks and the run-wide precision setting the rest of the
package relies on.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

_PRECISIONS = {32: np.float32, 64: np.float64}


def dtype_for(bits: int) -> type:
    try:
        return _PRECISIONS[bits]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {bits}") from None


def bits_of(dtype) -> int:
    return np.dtype(dtype).itemsize * 8


def as_matrix(data, dtype=np.float64) -> np.ndarray:
    m = np.ascontiguousarray(data, dtype=dtype)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def as_vector(data, dtype=np.float64) -> np.ndarray:
    v = np.ascontiguousarray(data, dtype=dtype)
    if v.ndim != 1 or v.shape[0] == 0:
        raise ShapeError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    return v


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul takes 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def outer(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if u.ndim != 1 or v.ndim != 1 or u.size == 0 or v.size == 0:
        raise ShapeError("outer takes two non-empty vectors")
    return np.outer(u, v)


def axpy_into(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``y += alpha * x`` in place; returns ``y``."""
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    if alpha != 0:
        y += y.dtype.type(alpha) * x
    return y


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise FloatingPointError(f"non-finite values in {what}")
    return m


def max_rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Max-abs difference scaled by the larger operand's max-abs entry."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare {a.shape} with {b.shape}")
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    diff = float(np.max(np.abs(a - b), initial=0.0))
    if scale == 0.0:
        return diff
    return diff / scale
