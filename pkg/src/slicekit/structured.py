"""The six structured state-transition families.

Each channel matrix is one of: dense, diagonal, diagonal-plus-low-rank,
block-diagonal, random-sparse, or Walsh-Hadamard-times-diagonal. A
`StructuredMatrix` knows how to apply itself to a hidden vector at its
structure's native cost, materialize to a dense matrix, and enumerate its
trainable parameters; a `ChannelFamily` is the per-channel collection
driving one layer.

Walsh-Hadamard matrices carry a parametrization mode: in training mode the
diagonal is tanh(raw), keeping effective entries inside [-1, 1]; probe mode
uses the raw diagonal directly so expressivity diagnostics can place unit
Gaussians on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import hadamard
from .linalg import DimensionError
from .rng import Rng

DENSE = "dense"
DIAGONAL = "diagonal"
DPLR = "dplr"
BLOCK_DIAGONAL = "block_diagonal"
SPARSE = "sparse"
WALSH_HADAMARD = "walsh_hadamard"

ALL_KINDS = (DENSE, DIAGONAL, DPLR, BLOCK_DIAGONAL, SPARSE, WALSH_HADAMARD)

INIT_TRAINING = "training"
INIT_PROBE = "probe"


@dataclass(frozen=True)
class StructureKind:
    """Structural family tag plus its shape hyper-parameters.

    rank      - DPLR only, number of rank-one terms (r >= 0)
    blocks    - block-diagonal only, block sizes summing to d_h
    density   - sparse only, Bernoulli keep-probability p in (0, 1]
    """

    name: str
    rank: int = 0
    blocks: tuple[int, ...] = ()
    density: float = 0.0

    def __post_init__(self):
        if self.name not in ALL_KINDS:
            raise ValueError(f"unknown structure kind {self.name!r}")
        if self.name == DPLR and self.rank < 0:
            raise ValueError("DPLR rank must be >= 0")
        if self.name == SPARSE and not (0.0 < self.density <= 1.0):
            raise ValueError("sparse density must be in (0, 1]")

    def validate_dim(self, d_h: int) -> None:
        if self.name == BLOCK_DIAGONAL:
            if not self.blocks or sum(self.blocks) != d_h:
                raise ValueError(f"block sizes {self.blocks} must sum to d_h={d_h}")
        if self.name == WALSH_HADAMARD and not hadamard.is_power_of_two(d_h):
            raise ValueError(f"Walsh-Hadamard needs power-of-two d_h, got {d_h}")


def kind_of(name: str, *, rank: int = 0, blocks=(), density: float = 0.0) -> StructureKind:
    return StructureKind(name, rank=rank, blocks=tuple(int(b) for b in blocks), density=density)


def nonzero_count(kind: StructureKind, d_h: int, d_omega: int = 1) -> int:
    """Trainable nonzeros: per matrix when d_omega=1, family total otherwise."""
    kind.validate_dim(d_h)
    if kind.name == DENSE:
        per = d_h * d_h
    elif kind.name == DIAGONAL:
        per = d_h
    elif kind.name == DPLR:
        per = d_h * (1 + 2 * kind.rank)
    elif kind.name == BLOCK_DIAGONAL:
        per = int(sum(b * b for b in kind.blocks))
    elif kind.name == WALSH_HADAMARD:
        per = d_h
    else:  # SPARSE: expectation d_h^2 * p; actual count is mask-dependent
        per = int(round(d_h * d_h * kind.density))
    return per * d_omega


@dataclass
class StructuredMatrix:
    """One state-transition matrix in a structural family.

    `params` layout per kind:
      dense           (d_h*d_h,) row-major
      diagonal        (d_h,)
      dplr            (d_h,) diag then (d_h*r,) U columns then (d_h*r,) V columns
      block_diagonal  concatenated row-major blocks
      sparse          values at `mask_rows/mask_cols` positions
      walsh_hadamard  (d_h,) raw diagonal (tanh-mapped in training mode)
    """

    kind: StructureKind
    d_h: int
    params: np.ndarray
    mask_rows: np.ndarray | None = None
    mask_cols: np.ndarray | None = None
    param_mode: str = INIT_TRAINING
    _cached_dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.kind.validate_dim(self.d_h)
        want = self.param_count()
        if self.params.shape != (want,):
            raise ValueError(f"{self.kind.name}: expected {want} params, got {self.params.shape}")

    def param_count(self) -> int:
        if self.kind.name == SPARSE:
            return 0 if self.mask_rows is None else int(self.mask_rows.shape[0])
        return nonzero_count(self.kind, self.d_h)

    def _dplr_parts(self):
        d, r = self.d_h, self.kind.rank
        diag = self.params[:d]
        u = self.params[d:d + d * r].reshape(d, r)
        v = self.params[d + d * r:].reshape(d, r)
        return diag, u, v

    def wh_diagonal(self) -> np.ndarray:
        """Effective Walsh-Hadamard diagonal (inside [-1, 1] in training mode)."""
        if self.param_mode == INIT_TRAINING:
            return np.tanh(self.params)
        return self.params

    def apply(self, v: np.ndarray) -> np.ndarray:
        """A @ v at the structure's native cost (FWHT path for Walsh-Hadamard)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.d_h:
            raise DimensionError(f"vector length {v.shape[0]} != d_h {self.d_h}")
        k = self.kind.name
        if k == DIAGONAL:
            return self.params * v
        if k == DENSE:
            return self.params.reshape(self.d_h, self.d_h) @ v
        if k == DPLR:
            diag, u, v_fac = self._dplr_parts()
            return diag * v + u @ (v_fac.T @ v)
        if k == BLOCK_DIAGONAL:
            out = np.empty_like(v)
            off = 0
            for blk in self.iter_blocks():
                b = blk.shape[0]
                out[off:off + b] = blk @ v[off:off + b]
                off += b
            return out
        if k == SPARSE:
            out = np.zeros_like(v)
            np.add.at(out, self.mask_rows, self.params * v[self.mask_cols])
            return out
        # Walsh-Hadamard: (1/sqrt(n)) H diag(delta) v via the fast transform
        return hadamard.fwht(self.wh_diagonal() * v, normalize=True)

    def iter_blocks(self):
        """Row-major views of the dense blocks (block-diagonal only)."""
        off = 0
        for b in self.kind.blocks:
            yield self.params[off:off + b * b].reshape(b, b)
            off += b * b

    def materialize(self) -> np.ndarray:
        """Dense d_h x d_h form of the matrix."""
        d = self.d_h
        k = self.kind.name
        if k == DENSE:
            return self.params.reshape(d, d).copy()
        if k == DIAGONAL:
            return np.diag(self.params)
        if k == DPLR:
            diag, u, v_fac = self._dplr_parts()
            return np.diag(diag) + u @ v_fac.T
        if k == BLOCK_DIAGONAL:
            out = np.zeros((d, d))
            off = 0
            for blk in self.iter_blocks():
                b = blk.shape[0]
                out[off:off + b, off:off + b] = blk
                off += b
            return out
        if k == SPARSE:
            out = np.zeros((d, d))
            np.add.at(out, (self.mask_rows, self.mask_cols), self.params)
            return out
        h = hadamard.sylvester(d).astype(np.float64)
        return (h * self.wh_diagonal()[None, :]) / np.sqrt(d)


@dataclass
class ChannelFamily:
    """The d_omega per-channel matrices of one layer, identical kind and d_h."""

    kind: StructureKind
    d_h: int
    matrices: list[StructuredMatrix]

    def __post_init__(self):
        if any(m.kind != self.kind or m.d_h != self.d_h for m in self.matrices):
            raise ValueError("family members must share kind and d_h")

    @property
    def d_omega(self) -> int:
        return len(self.matrices)

    def nonzeros(self) -> int:
        return sum(m.param_count() for m in self.matrices)

    def materialize_stack(self) -> np.ndarray:
        """(d_omega, d_h, d_h) dense stack; probe/oracle use only."""
        return np.stack([m.materialize() for m in self.matrices])


def _draw_sparse_mask(rng: Rng, d_h: int, p: float):
    keep = rng.bernoulli(p, (d_h, d_h))
    rows, cols = np.nonzero(keep)
    return rows.astype(np.intp), cols.astype(np.intp)


def init_matrix(kind: StructureKind, d_h: int, rng: Rng, policy: str = INIT_TRAINING) -> StructuredMatrix:
    """Draw one structured matrix.

    Probe policy follows the expressivity-analysis scalings: dense entries
    N(0, 1/d_h), per-block N(0, 1/b), surviving sparse entries N(0, 1/(d_h p)),
    raw unit Gaussian Walsh-Hadamard diagonal. Training policy uses the same
    variance-preserving scalings but stores the Walsh-Hadamard diagonal as an
    unconstrained parameter mapped through tanh.
    """
    kind.validate_dim(d_h)
    if policy not in (INIT_TRAINING, INIT_PROBE):
        raise ValueError(f"unknown init policy {policy!r}")
    name = kind.name
    mask = (None, None)
    if name == DENSE:
        params = rng.normal(d_h * d_h, std=1.0 / np.sqrt(d_h))
    elif name == DIAGONAL:
        params = rng.normal(d_h, std=1.0)
    elif name == DPLR:
        r = kind.rank
        scale = 1.0 / np.sqrt(d_h)
        params = np.concatenate([
            rng.normal(d_h, std=scale),
            rng.normal(d_h * r, std=scale),
            rng.normal(d_h * r, std=scale),
        ]) if r > 0 else rng.normal(d_h, std=scale)
    elif name == BLOCK_DIAGONAL:
        parts = [rng.normal(b * b, std=1.0 / np.sqrt(b)) for b in kind.blocks]
        params = np.concatenate(parts)
    elif name == SPARSE:
        rows, cols = _draw_sparse_mask(rng, d_h, kind.density)
        mask = (rows, cols)
        params = rng.normal(rows.shape[0], std=1.0 / np.sqrt(d_h * kind.density))
    else:  # WALSH_HADAMARD
        if policy == INIT_PROBE:
            params = rng.normal(d_h, std=1.0)
        else:
            # raw params uniform in (-1, 1); effective diagonal tanh(raw)
            params = rng.uniform(d_h, low=-1.0, high=1.0)
    return StructuredMatrix(
        kind=kind, d_h=d_h, params=np.asarray(params, dtype=np.float64),
        mask_rows=mask[0], mask_cols=mask[1], param_mode=policy,
    )


def init_family(kind: StructureKind, d_h: int, d_omega: int, rng: Rng,
                policy: str = INIT_TRAINING) -> ChannelFamily:
    """Draw d_omega independent matrices (per-channel sparse masks included)."""
    mats = [init_matrix(kind, d_h, rng.child(i), policy) for i in range(d_omega)]
    return ChannelFamily(kind=kind, d_h=d_h, matrices=mats)
