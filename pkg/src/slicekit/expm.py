"""Matrix exponential by scaling-and-squaring with a Pade(13,13) core.

Reference-grade double precision: squaring kicks in once the 1-norm
exceeds 5.4, below which the order-13 approximant is accurate to machine
precision. Used for exponential-mode flows and Log-ODE interval maps.
"""

from __future__ import annotations

import numpy as np

_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)

_THETA13 = 5.4


def expm(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expm expects a square matrix, got {a.shape}")
    norm1 = float(np.max(np.sum(np.abs(a), axis=0))) if a.size else 0.0
    squarings = max(0, int(np.ceil(np.log2(norm1 / _THETA13))) if norm1 > _THETA13 else 0)
    a_scaled = a / (2.0 ** squarings)

    b = _PADE13
    ident = np.eye(a.shape[0])
    a2 = a_scaled @ a_scaled
    a4 = a2 @ a2
    a6 = a2 @ a4
    u = a_scaled @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
                    + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    r = np.linalg.solve(v - u, v + u)
    for _ in range(squarings):
        r = r @ r
    return r
