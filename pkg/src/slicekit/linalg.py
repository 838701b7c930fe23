"""Minimal dense linear algebra on row-major float arrays.

Matrices are plain 2-D numpy arrays (row-major, float64 by default;
float32 available for speed runs). The helpers here add the shape and
finiteness checking the rest of the engine relies on.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng


class DimensionError(ValueError):
    """Shapes of the operands are incompatible."""


def as_matrix(data, dtype=np.float64) -> np.ndarray:
    m = np.asarray(data, dtype=dtype)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} contains non-finite entries")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape errors.

    Floating-point associativity is not assumed anywhere downstream; only
    shape correctness is guaranteed here.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    v = np.asarray(v)
    if a.ndim != 2 or v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec shapes incompatible: {a.shape} x {v.shape}")
    return a @ v


def gaussian_matrix(rng: Rng, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
    """i.i.d. N(0, std^2) matrix, deterministic given the rng stream."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal((rows, cols), std=std)


def identity(n: int, dtype=np.float64) -> np.ndarray:
    return np.eye(n, dtype=dtype)


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    """max |got-want| / max(1, max|want|); 0 for two empty arrays."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.size == 0 and want.size == 0:
        return 0.0
    scale = max(1.0, float(np.max(np.abs(want))))
    return float(np.max(np.abs(got - want))) / scale
