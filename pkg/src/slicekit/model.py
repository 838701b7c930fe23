"""Stacked sequence model: embedding, structured-CDE layers, mixing blocks,
normalization, and per-position readout.

Each block runs the hidden state through the per-interval flow recurrence
driven by the layer input (time channel prepended), then a linear mix with
tanh (or a GLU), layer normalization, and dropout. The readout produces
logits at every position, matching the token-tagging losses of the
state-tracking benchmarks.

The batched forward here is the training path; it matches the flows-scan
module's per-sequence solvers and is tested against them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flows, logsig
from .hadamard import sylvester
from .rng import Rng
from .structured import (BLOCK_DIAGONAL, DENSE, DIAGONAL, DPLR, SPARSE,
                         WALSH_HADAMARD, ChannelFamily, StructureKind,
                         StructuredMatrix, nonzero_count)

SOLVER_SEQUENTIAL = "sequential"
SOLVER_PARALLEL = "parallel_scan"
SOLVER_HYBRID = "hybrid"

BLOCK_TANH = "tanh_mix"
BLOCK_GLU = "glu"

LN_EPS = 1e-12


@dataclass
class SliceLayerConfig:
    kind: StructureKind
    d_h: int
    flow_order: str = flows.FIRST
    solver: str = SOLVER_SEQUENTIAL
    window: int = 4           # hybrid solver only
    depth: int = 2            # hybrid solver only

    def validate(self):
        self.kind.validate_dim(self.d_h)
        if self.solver not in (SOLVER_SEQUENTIAL, SOLVER_PARALLEL, SOLVER_HYBRID):
            raise ValueError(f"unknown solver {self.solver!r}")


@dataclass
class SliceModelConfig:
    vocab_size: int
    embed_dim: int
    n_classes: int
    layers: list[SliceLayerConfig]
    block_style: str = BLOCK_TANH
    dropout: float = 0.0
    embed_std: float = 0.3

    def validate(self):
        if len(self.layers) < 1:
            raise ValueError("need at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for lc in self.layers:
            lc.validate()


def build_omega(x: np.ndarray, dt: np.ndarray | float = 1.0) -> np.ndarray:
    """Channel increments dt * (1, x_t) for a (T, width) input sequence;
    also accepts a batch (B, T, width)."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 3
    if not batched:
        x = x[None]
    b, t, _ = x.shape
    dt_arr = np.broadcast_to(np.asarray(dt, dtype=np.float64), (b, t)).copy()
    if np.any(dt_arr < 0.0):
        raise ValueError("step durations must be non-negative")
    out = np.concatenate([np.ones((b, t, 1)), x], axis=2) * dt_arr[:, :, None]
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# Trainable layer: flat parameters plus structural metadata
# ---------------------------------------------------------------------------

@dataclass
class LayerShapes:
    """Structural metadata for one layer's transition family."""

    kind: StructureKind
    d_h: int
    d_omega: int
    masks: list | None = None        # sparse: per-channel (rows, cols)
    per_channel: int = 0             # params per channel (sparse: list below)
    channel_counts: list = field(default_factory=list)

    @classmethod
    def create(cls, kind: StructureKind, d_h: int, d_omega: int, rng: Rng | None):
        shapes = cls(kind=kind, d_h=d_h, d_omega=d_omega)
        if kind.name == SPARSE:
            if rng is None:
                raise ValueError("sparse layers need an rng to draw masks")
            shapes.masks = []
            for c in range(d_omega):
                keep = rng.child(c).bernoulli(kind.density, (d_h, d_h))
                rows, cols = np.nonzero(keep)
                shapes.masks.append((rows.astype(np.intp), cols.astype(np.intp)))
            shapes.channel_counts = [len(r) for r, _ in shapes.masks]
        else:
            shapes.per_channel = nonzero_count(kind, d_h)
            shapes.channel_counts = [shapes.per_channel] * d_omega
        return shapes

    @property
    def total_params(self) -> int:
        return int(sum(self.channel_counts))

    def channel_slices(self):
        off = 0
        for c in self.channel_counts:
            yield slice(off, off + c)
            off += c

    def family(self, params: np.ndarray) -> ChannelFamily:
        """View the flat parameter buffer as a ChannelFamily (no copies)."""
        mats = []
        for c, sl in enumerate(self.channel_slices()):
            kw = {}
            if self.kind.name == SPARSE:
                kw = dict(mask_rows=self.masks[c][0], mask_cols=self.masks[c][1])
            mats.append(StructuredMatrix(kind=self.kind, d_h=self.d_h,
                                         params=params[sl], **kw))
        return ChannelFamily(kind=self.kind, d_h=self.d_h, matrices=mats)

    def materialize_channels(self, params: np.ndarray) -> np.ndarray:
        """(d_omega, d_h, d_h) dense stack used by the dense training path."""
        d = self.d_h
        out = np.zeros((self.d_omega, d, d))
        name = self.kind.name
        for c, sl in enumerate(self.channel_slices()):
            p = params[sl]
            if name == DENSE:
                out[c] = p.reshape(d, d)
            elif name == DPLR:
                r = self.kind.rank
                out[c] = np.diag(p[:d])
                if r:
                    u = p[d:d + d * r].reshape(d, r)
                    v = p[d + d * r:].reshape(d, r)
                    out[c] += u @ v.T
            elif name == SPARSE:
                rows, cols = self.masks[c]
                out[c][rows, cols] = p
            elif name == WALSH_HADAMARD:
                h = sylvester(d).astype(np.float64) / np.sqrt(d)
                out[c] = h * np.tanh(p)[None, :]
            else:
                raise AssertionError(f"dense path not used for {name}")
        return out

    def project_gradient(self, params: np.ndarray, d_dense: np.ndarray) -> np.ndarray:
        """Pull a dense-stack gradient back onto the structured parameters."""
        d = self.d_h
        grad = np.zeros_like(params)
        name = self.kind.name
        for c, sl in enumerate(self.channel_slices()):
            g = d_dense[c]
            if name == DENSE:
                grad[sl] = g.ravel()
            elif name == DPLR:
                r = self.kind.rank
                p = params[sl]
                gc = np.empty(sl.stop - sl.start)
                gc[:d] = np.diag(g)
                if r:
                    u = p[d:d + d * r].reshape(d, r)
                    v = p[d + d * r:].reshape(d, r)
                    gc[d:d + d * r] = (g @ v).ravel()
                    gc[d + d * r:] = (g.T @ u).ravel()
                grad[sl] = gc
            elif name == SPARSE:
                rows, cols = self.masks[c]
                grad[sl] = g[rows, cols]
            elif name == WALSH_HADAMARD:
                p = params[sl]
                h = sylvester(d).astype(np.float64) / np.sqrt(d)
                g_delta = np.einsum("pk,pk->k", h, g)
                grad[sl] = g_delta * (1.0 - np.tanh(p) ** 2)
        return grad


INIT_FLOW_SCALE = 0.35  # target per-step flow perturbation size at init


def init_layer_params(shapes: LayerShapes, rng: Rng, input_var: float = 1.0) -> np.ndarray:
    """Training init: Gaussians scaled so the per-step summed transition
    perturbation has size INIT_FLOW_SCALE given the expected increment norm
    (time channel plus width inputs of variance input_var). Walsh-Hadamard
    raw diagonals start uniform in (-1, 1)."""
    name = shapes.kind.name
    d, dw = shapes.d_h, shapes.d_omega
    fan = np.sqrt(1.0 + (dw - 1) * input_var) / INIT_FLOW_SCALE
    if name == WALSH_HADAMARD:
        return rng.uniform(shapes.total_params, low=-1.0, high=1.0)
    if name == BLOCK_DIAGONAL:
        parts = []
        for c in range(dw):
            for b in shapes.kind.blocks:
                parts.append(rng.normal(b * b, std=1.0 / (np.sqrt(b) * fan)))
        return np.concatenate(parts)
    if name == DIAGONAL:
        return rng.normal(shapes.total_params, std=1.0 / fan)
    if name == SPARSE:
        scale = 1.0 / (np.sqrt(shapes.d_h * shapes.kind.density) * fan)
        return rng.normal(shapes.total_params, std=scale)
    return rng.normal(shapes.total_params, std=1.0 / (np.sqrt(d) * fan))


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class SliceModel:
    """Parameter store plus forward pass. Parameters live in a flat dict of
    named float64 buffers so the optimizer and checkpoint format can treat
    them uniformly."""

    def __init__(self, config: SliceModelConfig, rng: Rng):
        config.validate()
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.shapes: list[LayerShapes] = []
        init = rng.child(0)
        self.params["embed"] = init.child(0).normal(
            (config.vocab_size, config.embed_dim), std=config.embed_std)
        width = config.embed_dim
        for i, lc in enumerate(config.layers):
            d_omega = width + 1
            shapes = LayerShapes.create(lc.kind, lc.d_h, d_omega, init.child(100 + i))
            self.shapes.append(shapes)
            r = init.child(200 + i)
            input_var = config.embed_std ** 2 if i == 0 else 1.0
            self.params[f"layer{i}.a"] = init_layer_params(shapes, r.child(0), input_var)
            self.params[f"layer{i}.h0"] = np.full(lc.d_h, 1.0 / np.sqrt(lc.d_h))
            if config.block_style == BLOCK_TANH:
                self.params[f"layer{i}.mix_w"] = r.child(1).normal(
                    (lc.d_h, lc.d_h), std=1.0 / np.sqrt(lc.d_h))
                self.params[f"layer{i}.mix_b"] = np.zeros(lc.d_h)
            else:
                self.params[f"layer{i}.mix_w"] = r.child(1).normal(
                    (lc.d_h, lc.d_h), std=1.0 / np.sqrt(lc.d_h))
                self.params[f"layer{i}.mix_b"] = np.zeros(lc.d_h)
                self.params[f"layer{i}.gate_w"] = r.child(2).normal(
                    (lc.d_h, lc.d_h), std=1.0 / np.sqrt(lc.d_h))
                self.params[f"layer{i}.gate_b"] = np.zeros(lc.d_h)
            self.params[f"layer{i}.ln_g"] = np.ones(lc.d_h)
            self.params[f"layer{i}.ln_b"] = np.zeros(lc.d_h)
            width = lc.d_h
        self.params["readout_w"] = init.child(300).normal(
            (config.n_classes, width), std=1.0 / np.sqrt(width))
        self.params["readout_b"] = np.zeros(config.n_classes)

    # -- structured recurrence, batched over sequences ----------------------

    def _slice_forward(self, i: int, domega: np.ndarray):
        """States (B, T+1, d_h) of the layer-i recurrence plus a cache for
        the adjoint pass."""
        lc = self.config.layers[i]
        shapes = self.shapes[i]
        a = self.params[f"layer{i}.a"]
        h0 = self.params[f"layer{i}.h0"]
        bsz, t, _ = domega.shape
        d = lc.d_h
        name = lc.kind.name
        states = np.empty((bsz, t + 1, d))
        states[:, 0] = h0
        if name == DIAGONAL:
            adiag = a.reshape(shapes.d_omega, d)
            diag = 1.0 + np.einsum("btw,wd->btd", domega, adiag)
            for j in range(t):
                states[:, j + 1] = diag[:, j] * states[:, j]
            return states, {"diag": diag, "adiag": adiag}
        if name == BLOCK_DIAGONAL:
            mats, offs = [], []
            off_p, off_d = 0, 0
            per = sum(b * b for b in lc.kind.blocks)
            aview = a.reshape(shapes.d_omega, per)
            for b in lc.kind.blocks:
                blk = aview[:, off_p:off_p + b * b].reshape(shapes.d_omega, b, b)
                m = np.eye(b) + np.einsum("btw,wpq->btpq", domega, blk)
                mats.append(m)
                offs.append((off_d, b))
                off_p += b * b
                off_d += b
            for j in range(t):
                for m, (od, b) in zip(mats, offs):
                    states[:, j + 1, od:od + b] = np.einsum(
                        "bpq,bq->bp", m[:, j], states[:, j, od:od + b])
            return states, {"blocks": mats, "offs": offs, "aview": aview}
        dense = shapes.materialize_channels(a)
        m = np.eye(d) + np.einsum("btw,wpq->btpq", domega, dense)
        for j in range(t):
            states[:, j + 1] = np.einsum("bpq,bq->bp", m[:, j], states[:, j])
        return states, {"m": m, "dense": dense}

    def _slice_backward(self, i: int, domega: np.ndarray, states: np.ndarray,
                        cache: dict, d_states: np.ndarray, grads: dict):
        """Adjoint of _slice_forward. d_states holds dL/dh_j for j=1..T;
        returns dL/d(domega)."""
        lc = self.config.layers[i]
        shapes = self.shapes[i]
        bsz, t, _ = domega.shape
        d = lc.d_h
        name = lc.kind.name
        adj = np.zeros((bsz, d))
        if name == DIAGONAL:
            diag = cache["diag"]
            gdiag = np.empty_like(diag)
            for j in reversed(range(t)):
                adj += d_states[:, j]
                gdiag[:, j] = adj * states[:, j]
                adj = diag[:, j] * adj
            adiag = cache["adiag"]
            grads[f"layer{i}.a"] += np.einsum(
                "btw,btd->wd", domega, gdiag).ravel()
            grads[f"layer{i}.h0"] += adj.sum(axis=0)
            return np.einsum("btd,wd->btw", gdiag, adiag)
        if name == BLOCK_DIAGONAL:
            mats, offs = cache["blocks"], cache["offs"]
            gm = [np.empty_like(m) for m in mats]
            for j in reversed(range(t)):
                adj += d_states[:, j]
                for m, g, (od, b) in zip(mats, gm, offs):
                    sub = adj[:, od:od + b]
                    g[:, j] = np.einsum("bp,bq->bpq", sub, states[:, j, od:od + b])
                    adj[:, od:od + b] = np.einsum("bpq,bp->bq", m[:, j], sub)
            d_dom = np.zeros_like(domega)
            ga_parts = [np.einsum("btw,btpq->wpq", domega, g).reshape(shapes.d_omega, b * b)
                        for g, (_, b) in zip(gm, offs)]
            off_p = 0
            aview = cache["aview"]
            for g, (od, b) in zip(gm, offs):
                blk = aview[:, off_p:off_p + b * b].reshape(shapes.d_omega, b, b)
                d_dom += np.einsum("btpq,wpq->btw", g, blk)
                off_p += b * b
            grads[f"layer{i}.a"] += np.concatenate(
                [p.reshape(shapes.d_omega, -1) for p in ga_parts], axis=1).ravel()
            grads[f"layer{i}.h0"] += adj.sum(axis=0)
            return d_dom
        m, dense = cache["m"], cache["dense"]
        gm = np.empty_like(m)
        for j in reversed(range(t)):
            adj += d_states[:, j]
            gm[:, j] = np.einsum("bp,bq->bpq", adj, states[:, j])
            adj = np.einsum("bpq,bp->bq", m[:, j], adj)
        d_dense = np.einsum("btw,btpq->wpq", domega, gm)
        grads[f"layer{i}.a"] += shapes.project_gradient(
            self.params[f"layer{i}.a"], d_dense)
        grads[f"layer{i}.h0"] += adj.sum(axis=0)
        return np.einsum("btpq,wpq->btw", gm, dense)

    # -- full forward --------------------------------------------------------

    def forward(self, tokens: np.ndarray, lengths: np.ndarray | None = None,
                train: bool = False, rng: Rng | None = None):
        """Per-position logits (B, T, classes) plus a cache for backward.

        Padded positions (beyond each sequence's length) carry zero
        increments, so states freeze there; the loss must mask them."""
        tokens = np.atleast_2d(np.asarray(tokens))
        bsz, t = tokens.shape
        if np.any(tokens >= self.config.vocab_size) or np.any(tokens < 0):
            raise ValueError("token id out of range")
        if lengths is None:
            lengths = np.full(bsz, t)
        mask = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
        x = self.params["embed"][tokens]
        cache = {"tokens": tokens, "mask": mask, "layers": []}
        dropout = self.config.dropout if train else 0.0
        for i, lc in enumerate(self.config.layers):
            dt = mask.astype(np.float64)
            domega = build_omega(x, dt)
            states, rec_cache = self._slice_forward(i, domega)
            s = states[:, 1:]
            w, b = self.params[f"layer{i}.mix_w"], self.params[f"layer{i}.mix_b"]
            pre = s @ w.T + b
            if self.config.block_style == BLOCK_TANH:
                y = np.tanh(pre)
                act_cache = {"y": y}
            else:
                gw, gb = self.params[f"layer{i}.gate_w"], self.params[f"layer{i}.gate_b"]
                gate_pre = s @ gw.T + gb
                gate = 1.0 / (1.0 + np.exp(-gate_pre))
                y = pre * gate
                act_cache = {"gate": gate, "pre": pre}
            mu = y.mean(axis=2, keepdims=True)
            centered = y - mu
            var = (centered ** 2).mean(axis=2, keepdims=True)
            inv = 1.0 / np.sqrt(var + LN_EPS)
            xhat = centered * inv
            z = xhat * self.params[f"layer{i}.ln_g"] + self.params[f"layer{i}.ln_b"]
            if dropout > 0.0:
                keep = rng.child(1000 + i).bernoulli(1.0 - dropout, z.shape) / (1.0 - dropout)
                z = z * keep
            else:
                keep = None
            cache["layers"].append({
                "x": x, "domega": domega, "states": states, "rec": rec_cache,
                "act": act_cache, "xhat": xhat, "inv": inv, "keep": keep, "s": s,
            })
            x = z
        logits = x @ self.params["readout_w"].T + self.params["readout_b"]
        cache["top"] = x
        return logits, cache

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward(self, cache: dict, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for every parameter given dL/dlogits."""
        grads = self.zero_grads()
        grads["readout_w"] += np.einsum("btc,btd->cd", d_logits, cache["top"])
        grads["readout_b"] += d_logits.sum(axis=(0, 1))
        dz = d_logits @ self.params["readout_w"]
        for i in reversed(range(len(self.config.layers))):
            lcache = cache["layers"][i]
            if lcache["keep"] is not None:
                dz = dz * lcache["keep"]
            g = self.params[f"layer{i}.ln_g"]
            xhat, inv = lcache["xhat"], lcache["inv"]
            grads[f"layer{i}.ln_g"] += np.einsum("btd,btd->d", dz, xhat)
            grads[f"layer{i}.ln_b"] += dz.sum(axis=(0, 1))
            dxhat = dz * g
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=2, keepdims=True)
            dy = (dxhat - m1 - xhat * m2) * inv
            s = lcache["s"]
            w = self.params[f"layer{i}.mix_w"]
            if self.config.block_style == BLOCK_TANH:
                y = lcache["act"]["y"]
                dpre = dy * (1.0 - y * y)
                ds = dpre @ w
                grads[f"layer{i}.mix_w"] += np.einsum("btd,bte->de", dpre, s)
                grads[f"layer{i}.mix_b"] += dpre.sum(axis=(0, 1))
            else:
                gate, pre = lcache["act"]["gate"], lcache["act"]["pre"]
                dpre = dy * gate
                dgate_pre = dy * pre * gate * (1.0 - gate)
                gw = self.params[f"layer{i}.gate_w"]
                ds = dpre @ w + dgate_pre @ gw
                grads[f"layer{i}.mix_w"] += np.einsum("btd,bte->de", dpre, s)
                grads[f"layer{i}.mix_b"] += dpre.sum(axis=(0, 1))
                grads[f"layer{i}.gate_w"] += np.einsum("btd,bte->de", dgate_pre, s)
                grads[f"layer{i}.gate_b"] += dgate_pre.sum(axis=(0, 1))
            d_dom = self._slice_backward(i, lcache["domega"], lcache["states"],
                                         lcache["rec"], ds, grads)
            dt = cache["mask"].astype(np.float64)
            dx = d_dom[:, :, 1:] * dt[:, :, None]
            if i == 0:
                np.add.at(grads["embed"], cache["tokens"], dx)
            else:
                dz = dx
        return grads


def layer_forward(cfg: SliceLayerConfig, family: ChannelFamily,
                  increments: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Single-sequence layer recurrence through the configured solver.

    Sequential and ParallelScan return all n+1 states; Hybrid returns the
    window-boundary states."""
    cfg.validate()
    if family.kind != cfg.kind or family.d_h != cfg.d_h:
        raise ValueError("family does not match the layer config")
    if cfg.solver == SOLVER_SEQUENTIAL:
        return flows.scan_sequential(family, increments, h0, order=cfg.flow_order)
    if cfg.solver == SOLVER_PARALLEL:
        return flows.scan_parallel(family, increments, h0, order=cfg.flow_order)
    return logsig.hybrid_solve(family, increments, cfg.window, cfg.depth, h0)


def matrix_state_forward(family: ChannelFamily, bias: np.ndarray,
                         omega_inc: np.ndarray, xi_inc: np.ndarray,
                         h0_cols: np.ndarray, parallel: bool = True) -> np.ndarray:
    """Matrix-valued hidden state: each column k follows the shared flow
    recurrence plus its own bias drive bias[:, k] * dxi[:, k].

    Returns (n+1, d_h, n_cols) states."""
    omega_inc = np.atleast_2d(np.asarray(omega_inc, dtype=np.float64))
    xi_inc = np.atleast_2d(np.asarray(xi_inc, dtype=np.float64))
    bias = np.asarray(bias, dtype=np.float64)
    h0_cols = np.asarray(h0_cols, dtype=np.float64)
    n = omega_inc.shape[0]
    d, n_cols = h0_cols.shape
    if bias.shape != (d, n_cols) or xi_inc.shape != (n, n_cols):
        raise ValueError("bias / xi shapes inconsistent with the state columns")
    step_bias = bias[None, :, :] * xi_inc[:, None, :]
    if not parallel:
        out = np.empty((n + 1, d, n_cols))
        out[0] = h0_cols
        for j in range(n):
            f = flows.build_flow(family, omega_inc[j])
            for k in range(n_cols):
                out[j + 1, :, k] = f.apply(out[j, :, k]) + step_bias[j, :, k]
        return out
    batch = flows.build_flow_batch(family, omega_inc, bias=step_bias)
    prefixes = flows._blelloch_inclusive(batch)
    out = np.empty((n + 1, d, n_cols))
    out[0] = h0_cols
    out[1:] = prefixes.apply_matrix_states(h0_cols)
    return out
