"""Sylvester Hadamard matrices and the fast Walsh-Hadamard transform.

The engine fixes Sylvester (natural) ordering globally; no sequency
reordering is applied anywhere. `fwht` is the O(n log n) butterfly and
keeps an exact count of additions so cost claims are testable.
"""

from __future__ import annotations

import numpy as np

_add_count = 0


def reset_add_count() -> None:
    global _add_count
    _add_count = 0


def add_count() -> int:
    return _add_count


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def sylvester(n: int) -> np.ndarray:
    """Order-n Hadamard matrix, entries +-1, H H^T = n I exactly (integer)."""
    if not is_power_of_two(n):
        raise ValueError(f"Hadamard order must be a power of two, got {n}")
    h = np.array([[1]], dtype=np.int64)
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def fwht(v: np.ndarray, normalize: bool = False) -> np.ndarray:
    """Walsh-Hadamard transform of v, equal to sylvester(n) @ v.

    Butterfly over log2(n) stages, n additions per stage (additions and
    subtractions both count). With `normalize` the result is scaled by
    n^(-1/2), making the transform an orthonormal involution.
    """
    global _add_count
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if not is_power_of_two(n):
        raise ValueError(f"fwht length must be a power of two, got {n}")
    out = v.copy()
    h = 1
    while h < n:
        blk = out.reshape(-1, 2 * h, *out.shape[1:])
        a = blk[:, :h]
        b = blk[:, h:]
        s = a + b
        d = a - b
        blk[:, :h] = s
        blk[:, h:] = d
        _add_count += s.size + d.size  # n/2 sums + n/2 differences per stage (per column)
        h *= 2
    if normalize:
        out /= np.sqrt(n)
    return out
