"""Per-interval flow maps and their sequential / parallel-scan composition.

A flow transports the hidden state across one interval: first-order
`I + sum_i dw_i A_i` or its exponential refinement. Diagonal and
block-diagonal flows compose without leaving their structure; every other
family is closed only under application, so its flows materialize to a
dense map at the first composition (lazily, keeping the recurrent path at
native cost). A module-level counter tracks dense materializations and
combine operations so the structure-closure claims stay testable.

Composition convention: compose(f, g) represents x -> f(g(x)), g earlier
in time. The parallel path is a work-efficient Blelloch up/down sweep with
a fixed left-to-right combine order, so results are deterministic for any
worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expm import expm
from .linalg import DimensionError
from .structured import BLOCK_DIAGONAL, DIAGONAL, ChannelFamily

FIRST = "first"
EXPONENTIAL = "exponential"

_counters = {"dense_materializations": 0, "combine_ops": 0, "combine_rounds": 0}


def reset_counters() -> None:
    for k in _counters:
        _counters[k] = 0


def counters() -> dict:
    return dict(_counters)


def _count(key: str, n: int = 1) -> None:
    _counters[key] += n


# ---------------------------------------------------------------------------
# Single-interval flow elements
# ---------------------------------------------------------------------------

REP_DIAG = "diag"
REP_BLOCK = "block"
REP_DENSE = "dense"
REP_LAZY = "lazy"  # first-order flow kept as (family, dw); dense on first compose


@dataclass
class FlowElement:
    """Linear (or affine, when bias is set) map over one interval."""

    rep: str
    d_h: int
    diag: np.ndarray | None = None            # (d_h,)
    blocks: list | None = None                # list of (b_j, b_j)
    dense: np.ndarray | None = None           # (d_h, d_h)
    family: ChannelFamily | None = None       # lazy rep only
    dw: np.ndarray | None = None              # lazy rep only
    bias: np.ndarray | None = None            # (d_h,), optional affine part

    def block_partition(self) -> tuple | None:
        if self.rep != REP_BLOCK:
            return None
        return tuple(b.shape[0] for b in self.blocks)

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.d_h:
            raise DimensionError(f"state length {v.shape[0]} != d_h {self.d_h}")
        if self.rep == REP_DIAG:
            out = self.diag * v
        elif self.rep == REP_BLOCK:
            out = np.empty_like(v)
            off = 0
            for blk in self.blocks:
                b = blk.shape[0]
                out[off:off + b] = blk @ v[off:off + b]
                off += b
        elif self.rep == REP_DENSE:
            out = self.dense @ v
        else:  # lazy first-order: v + sum_i dw_i (A_i v), native per-structure cost
            out = v.copy()
            for i, m in enumerate(self.family.matrices):
                w = self.dw[i]
                if w != 0.0:
                    out += w * m.apply(v)
        if self.bias is not None:
            out = out + self.bias
        return out

    def materialize(self) -> np.ndarray:
        """Dense d_h x d_h map (linear part); counted as a materialization
        unless the element is already dense."""
        if self.rep == REP_DENSE:
            return self.dense
        _count("dense_materializations")
        if self.rep == REP_DIAG:
            return np.diag(self.diag)
        if self.rep == REP_BLOCK:
            out = np.zeros((self.d_h, self.d_h))
            off = 0
            for blk in self.blocks:
                b = blk.shape[0]
                out[off:off + b, off:off + b] = blk
                off += b
            return out
        out = np.eye(self.d_h)
        for i, m in enumerate(self.family.matrices):
            if self.dw[i] != 0.0:
                out += self.dw[i] * m.materialize()
        return out


def identity_flow(d_h: int, like: FlowElement | None = None) -> FlowElement:
    """Identity in the structure of `like` (dense when unspecified)."""
    if like is not None and like.rep == REP_DIAG:
        return FlowElement(REP_DIAG, d_h, diag=np.ones(d_h))
    if like is not None and like.rep == REP_BLOCK:
        return FlowElement(REP_BLOCK, d_h, blocks=[np.eye(b.shape[0]) for b in like.blocks])
    return FlowElement(REP_DENSE, d_h, dense=np.eye(d_h))


def build_flow(family: ChannelFamily, dw: np.ndarray, order: str = FIRST) -> FlowElement:
    """Flow for one interval with channel increments dw.

    First order: I + sum_i dw_i A_i, structure-preserving for diagonal and
    block-diagonal families and lazy otherwise. Exponential order is the
    reference map exp(sum_i dw_i A_i); it leaves diagonal/block structure
    intact and materializes everything else.
    """
    dw = np.asarray(dw, dtype=np.float64)
    if dw.shape != (family.d_omega,):
        raise DimensionError(f"expected {family.d_omega} increments, got {dw.shape}")
    d = family.d_h
    name = family.kind.name
    if name == DIAGONAL:
        acc = np.zeros(d)
        for i, m in enumerate(family.matrices):
            acc += dw[i] * m.params
        if order == FIRST:
            return FlowElement(REP_DIAG, d, diag=1.0 + acc)
        return FlowElement(REP_DIAG, d, diag=np.exp(acc))
    if name == BLOCK_DIAGONAL:
        sizes = family.kind.blocks
        sums = [np.zeros((b, b)) for b in sizes]
        for i, m in enumerate(family.matrices):
            for j, blk in enumerate(m.iter_blocks()):
                sums[j] += dw[i] * blk
        if order == FIRST:
            blocks = [np.eye(b) + s for b, s in zip(sizes, sums)]
        else:
            blocks = [expm(s) for s in sums]
        return FlowElement(REP_BLOCK, d, blocks=blocks)
    if order == FIRST:
        return FlowElement(REP_LAZY, d, family=family, dw=dw)
    acc = np.zeros((d, d))
    for i, m in enumerate(family.matrices):
        if dw[i] != 0.0:
            acc += dw[i] * m.materialize()
    _count("dense_materializations")
    return FlowElement(REP_DENSE, d, dense=expm(acc))


def compose(f: FlowElement, g: FlowElement) -> FlowElement:
    """x -> f(g(x)). Structure-preserving for matching diagonal / block
    representations; any other pairing downgrades to a dense map."""
    if f.d_h != g.d_h:
        raise DimensionError(f"flow dims differ: {f.d_h} vs {g.d_h}")
    _count("combine_ops")
    bias = None
    if f.bias is not None or g.bias is not None:
        gb = g.bias if g.bias is not None else np.zeros(f.d_h)
        bias = f.apply(gb)  # = M_f b_g + b_f
    if f.rep == REP_DIAG and g.rep == REP_DIAG:
        return FlowElement(REP_DIAG, f.d_h, diag=f.diag * g.diag, bias=bias)
    if f.rep == REP_BLOCK and g.rep == REP_BLOCK and f.block_partition() == g.block_partition():
        blocks = [bf @ bg for bf, bg in zip(f.blocks, g.blocks)]
        return FlowElement(REP_BLOCK, f.d_h, blocks=blocks, bias=bias)
    return FlowElement(REP_DENSE, f.d_h, dense=f.materialize() @ g.materialize(), bias=bias)


# ---------------------------------------------------------------------------
# Scans
# ---------------------------------------------------------------------------

def scan_sequential(family: ChannelFamily, increments: np.ndarray, h0: np.ndarray,
                    order: str = FIRST) -> np.ndarray:
    """All n+1 states of h_{j+1} = Flow_j h_j, at the structure's native
    per-step cost (no dense materialization on the first-order path)."""
    increments = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    n = increments.shape[0] if increments.size else 0
    h = np.asarray(h0, dtype=np.float64)
    states = np.empty((n + 1, family.d_h))
    states[0] = h
    for j in range(n):
        h = build_flow(family, increments[j], order=order).apply(h)
        states[j + 1] = h
    return states


class _FlowBatch:
    """n flows stored as vectorized buffers: diag (n,d), per-block list of
    (n,b,b), or dense (n,d,d); optional affine bias (n,d) or (n,d,c)."""

    def __init__(self, rep, d_h, diag=None, blocks=None, dense=None, bias=None):
        self.rep = rep
        self.d_h = d_h
        self.diag = diag
        self.blocks = blocks
        self.dense = dense
        self.bias = bias

    def __len__(self):
        if self.rep == REP_DIAG:
            return self.diag.shape[0]
        if self.rep == REP_BLOCK:
            return self.blocks[0].shape[0]
        return self.dense.shape[0]

    def take(self, idx):
        return _FlowBatch(
            self.rep, self.d_h,
            diag=None if self.diag is None else self.diag[idx],
            blocks=None if self.blocks is None else [b[idx] for b in self.blocks],
            dense=None if self.dense is None else self.dense[idx],
            bias=None if self.bias is None else self.bias[idx],
        )

    def put(self, idx, other):
        if self.diag is not None:
            self.diag[idx] = other.diag
        if self.blocks is not None:
            for mine, theirs in zip(self.blocks, other.blocks):
                mine[idx] = theirs
        if self.dense is not None:
            self.dense[idx] = other.dense
        if self.bias is not None:
            self.bias[idx] = other.bias

    def apply_states(self, vec):
        """Linear part applied to one vector: (len, d) states."""
        if self.rep == REP_DIAG:
            out = self.diag * vec[None, :]
        elif self.rep == REP_BLOCK:
            pieces, off = [], 0
            for blk in self.blocks:
                b = blk.shape[-1]
                pieces.append(np.einsum("nij,j->ni", blk, vec[off:off + b]))
                off += b
            out = np.concatenate(pieces, axis=1)
        else:
            out = np.einsum("nij,j->ni", self.dense, vec)
        if self.bias is not None:
            out = out + (self.bias if self.bias.ndim == 2 else self.bias[..., 0])
        return out

    def apply_matrix_states(self, h0_cols):
        """Linear part applied to (d, c) initial columns plus the (n, d, c)
        bias: the matrix-valued-state evaluation path."""
        if self.rep == REP_DIAG:
            out = self.diag[:, :, None] * h0_cols[None, :, :]
        elif self.rep == REP_BLOCK:
            pieces, off = [], 0
            for blk in self.blocks:
                b = blk.shape[-1]
                pieces.append(np.einsum("nij,jc->nic", blk, h0_cols[off:off + b]))
                off += b
            out = np.concatenate(pieces, axis=1)
        else:
            out = np.einsum("nij,jc->nic", self.dense, h0_cols)
        if self.bias is not None:
            out = out + self.bias
        return out

    def _apply_bias(self, bias):
        """Linear part applied to a stacked bias (n,d) or (n,d,c)."""
        if self.rep == REP_DIAG:
            return self.diag[..., None] * bias if bias.ndim == 3 else self.diag * bias
        if self.rep == REP_BLOCK:
            pieces, off = [], 0
            for blk in self.blocks:
                b = blk.shape[-1]
                sl = bias[:, off:off + b]
                spec = "nij,nj...->ni..."
                pieces.append(np.einsum(spec, blk, sl))
                off += b
            return np.concatenate(pieces, axis=1)
        return np.einsum("nij,nj...->ni...", self.dense, bias)

    def combine(self, earlier):
        """Batched compose(self, earlier): self is later in time."""
        _count("combine_ops", len(self))
        bias = None
        if self.bias is not None or earlier.bias is not None:
            eb = earlier.bias if earlier.bias is not None else np.zeros_like(self.bias)
            bias = self._apply_bias(eb)
            if self.bias is not None:
                bias = bias + self.bias
        if self.rep == REP_DIAG:
            return _FlowBatch(REP_DIAG, self.d_h, diag=self.diag * earlier.diag, bias=bias)
        if self.rep == REP_BLOCK:
            blocks = [np.matmul(a, b) for a, b in zip(self.blocks, earlier.blocks)]
            return _FlowBatch(REP_BLOCK, self.d_h, blocks=blocks, bias=bias)
        return _FlowBatch(REP_DENSE, self.d_h, dense=np.matmul(self.dense, earlier.dense), bias=bias)

    def identity_batch(self, n):
        bias = None
        if self.bias is not None:
            bias = np.zeros((n,) + self.bias.shape[1:])
        if self.rep == REP_DIAG:
            return _FlowBatch(REP_DIAG, self.d_h, diag=np.ones((n, self.d_h)), bias=bias)
        if self.rep == REP_BLOCK:
            blocks = [np.broadcast_to(np.eye(b.shape[-1]), (n, b.shape[-1], b.shape[-1])).copy()
                      for b in self.blocks]
            return _FlowBatch(REP_BLOCK, self.d_h, blocks=blocks, bias=bias)
        return _FlowBatch(REP_DENSE, self.d_h,
                          dense=np.broadcast_to(np.eye(self.d_h), (n, self.d_h, self.d_h)).copy(),
                          bias=bias)

    def concat(self, other):
        return _FlowBatch(
            self.rep, self.d_h,
            diag=None if self.diag is None else np.concatenate([self.diag, other.diag]),
            blocks=None if self.blocks is None else
                [np.concatenate([a, b]) for a, b in zip(self.blocks, other.blocks)],
            dense=None if self.dense is None else np.concatenate([self.dense, other.dense]),
            bias=None if self.bias is None else np.concatenate([self.bias, other.bias]),
        )


def _family_stack(family: ChannelFamily) -> np.ndarray:
    """(d_omega, d_h, d_h) dense channel stack, counted as materializations."""
    _count("dense_materializations", family.d_omega)
    return family.materialize_stack()


def build_flow_batch(family: ChannelFamily, increments: np.ndarray, order: str = FIRST,
                     bias: np.ndarray | None = None) -> _FlowBatch:
    """Vectorized build_flow over all rows of `increments`."""
    increments = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    n = increments.shape[0]
    d = family.d_h
    name = family.kind.name
    if name == DIAGONAL:
        # accumulate channel by channel in the same order as build_flow so
        # n=1 parallel results are bitwise equal to the sequential path
        acc = np.zeros((n, d))
        for i, m in enumerate(family.matrices):
            acc += increments[:, i, None] * m.params
        diag = 1.0 + acc if order == FIRST else np.exp(acc)
        return _FlowBatch(REP_DIAG, d, diag=diag, bias=bias)
    if name == BLOCK_DIAGONAL:
        blocks = []
        per_matrix = [list(m.iter_blocks()) for m in family.matrices]
        for j, b in enumerate(family.kind.blocks):
            acc = np.zeros((n, b, b))
            for i in range(family.d_omega):
                acc += increments[:, i, None, None] * per_matrix[i][j]
            if order == FIRST:
                blocks.append(np.eye(b) + acc)
            else:
                blocks.append(np.stack([expm(a) for a in acc]))
        return _FlowBatch(REP_BLOCK, d, blocks=blocks, bias=bias)
    stack = _family_stack(family)
    acc = np.einsum("ni,ipq->npq", increments, stack)
    if order == FIRST:
        dense = np.eye(d) + acc
    else:
        dense = np.stack([expm(a) for a in acc])
    return _FlowBatch(REP_DENSE, d, dense=dense, bias=bias)


def _blelloch_inclusive(batch: _FlowBatch) -> _FlowBatch:
    """Work-efficient up/down-sweep prefix composition, left-to-right order.

    Returns the inclusive prefixes P_j = F_j o ... o F_1. Combine rounds
    (tree levels) number ceil(log2 n); the down sweep revisits the same
    levels and one final element-wise pass converts exclusive to inclusive.
    """
    n = len(batch)
    if n == 0:
        return batch
    m = 1
    levels = 0
    while m < n:
        m *= 2
        levels += 1
    work = batch if m == n else batch.concat(batch.identity_batch(m - n))
    original = work.take(np.arange(m))

    for dlev in range(levels):
        step = 1 << (dlev + 1)
        targets = np.arange(step - 1, m, step)
        partners = targets - (step >> 1)
        work.put(targets, work.take(targets).combine(work.take(partners)))
        _count("combine_rounds")

    work.put(np.array([m - 1]), work.identity_batch(1))
    for dlev in reversed(range(levels)):
        step = 1 << (dlev + 1)
        targets = np.arange(step - 1, m, step)
        partners = targets - (step >> 1)
        left_up = work.take(partners)
        parent_down = work.take(targets)
        work.put(partners, parent_down)
        work.put(targets, left_up.combine(parent_down))

    inclusive = original.combine(work)  # P_j = F_j o E_j
    return inclusive.take(np.arange(n))


def scan_parallel(family: ChannelFamily, increments: np.ndarray, h0: np.ndarray,
                  order: str = FIRST) -> np.ndarray:
    """Blelloch-scan evaluation of the same recurrence as scan_sequential.

    Diagonal and block-diagonal flows stay in structure through every
    combine; all other families materialize dense maps (counted)."""
    increments = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    h0 = np.asarray(h0, dtype=np.float64)
    n = increments.shape[0] if increments.size else 0
    if n == 0:
        return h0[None, :].copy()
    batch = build_flow_batch(family, increments, order=order)
    prefixes = _blelloch_inclusive(batch)
    states = np.empty((n + 1, family.d_h))
    states[0] = h0
    states[1:] = prefixes.apply_states(h0)
    return states


def scan_flow_elements(flows: list, h0: np.ndarray) -> np.ndarray:
    """Parallel prefix over explicit FlowElements (Log-ODE window maps).

    Elements are promoted to a common representation first: diagonal and
    uniform block partitions stay structured, anything else goes dense."""
    h0 = np.asarray(h0, dtype=np.float64)
    if not flows:
        return h0[None, :].copy()
    d = flows[0].d_h
    has_bias = any(f.bias is not None for f in flows)
    bias = np.stack([f.bias if f.bias is not None else np.zeros(d) for f in flows]) if has_bias else None
    if all(f.rep == REP_DIAG for f in flows):
        batch = _FlowBatch(REP_DIAG, d, diag=np.stack([f.diag for f in flows]), bias=bias)
    elif (all(f.rep == REP_BLOCK for f in flows)
          and len({f.block_partition() for f in flows}) == 1):
        blocks = [np.stack([f.blocks[j] for f in flows]) for j in range(len(flows[0].blocks))]
        batch = _FlowBatch(REP_BLOCK, d, blocks=blocks, bias=bias)
    else:
        batch = _FlowBatch(REP_DENSE, d, dense=np.stack([f.materialize() for f in flows]), bias=bias)
    prefixes = _blelloch_inclusive(batch)
    out = np.empty((len(flows) + 1, d))
    out[0] = h0
    out[1:] = prefixes.apply_states(h0)
    return out
