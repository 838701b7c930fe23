"""Empirical probes of the expressivity theory and solver cost claims.

The Gram probe measures (1/d_h) <A_I h0, A_J h0> for channel words I, J on
families drawn with the analysis scalings; orthogonality (delta_{I,J}) at
growing width is the signature of maximal probabilistic expressivity, and
its failure for commuting diagonal channels is the expressivity
counterexample. The Log-ODE order probe fits empirical convergence slopes,
and the scan probes assert parallel/sequential agreement and structure
closure.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import flows, logsig
from .linalg import relative_error
from .rng import Rng
from .structured import (BLOCK_DIAGONAL, DENSE, DIAGONAL, DPLR, SPARSE,
                         WALSH_HADAMARD, ChannelFamily, init_family, kind_of,
                         INIT_PROBE)


def worker_count() -> int:
    """Worker cap from SLICE_THREADS (default 1: fully deterministic serial)."""
    try:
        return max(1, int(os.environ.get("SLICE_THREADS", "1")))
    except ValueError:
        return 1


def probe_kind(name: str, d_h: int, density_exponent: float = 0.5):
    """StructureKind with the analysis-mode shape defaults at a given dimension:
    blocks of ceil(log2 d_h), sparse keep-probability d_h^(eps-1)."""
    if name == BLOCK_DIAGONAL:
        b = max(1, int(np.ceil(np.log2(max(2, d_h)))))
        blocks = [b] * (d_h // b)
        if d_h - b * (d_h // b):
            blocks.append(d_h - b * (d_h // b))
        return kind_of(BLOCK_DIAGONAL, blocks=tuple(blocks))
    if name == SPARSE:
        return kind_of(SPARSE, density=float(d_h ** (density_exponent - 1.0)))
    if name == DPLR:
        return kind_of(DPLR, rank=max(1, d_h // 16))
    return kind_of(name)


def gram(word_i: tuple[int, ...], word_j: tuple[int, ...],
         family: ChannelFamily, h0: np.ndarray) -> float:
    """(1/d_h) <A_I h0, A_J h0>, letters 1-based, applied right to left."""
    def apply_word(word):
        v = h0
        for letter in reversed(word):
            v = family.matrices[letter - 1].apply(v)
        return v
    return float(apply_word(word_i) @ apply_word(word_j)) / family.d_h


@dataclass
class GramProbeConfig:
    kinds: tuple[str, ...] = (DENSE, DIAGONAL, BLOCK_DIAGONAL, SPARSE, WALSH_HADAMARD)
    dims: tuple[int, ...] = (64, 256, 1024)
    word_pairs: tuple = (((), ()), ((1,), (1,)), ((1,), (2,)),
                         ((1, 2), (1, 2)), ((1, 2), (2, 1)))
    trials: int = 200
    d_omega: int = 2
    seed: int = 0
    density_exponent: float = 0.5

    def __post_init__(self):
        for wi, wj in self.word_pairs:
            if max((*wi, *wj, 1)) > self.d_omega:
                raise ValueError("word letters exceed the channel count")
            if max(len(wi), len(wj)) > 3:
                raise ValueError("probe words are capped at length 3")


def gram_trial(kind_name: str, d_h: int, cfg: GramProbeConfig, trial: int):
    rng = Rng(cfg.seed).child(hash(kind_name) % 10_000).child(d_h).child(trial)
    kind = probe_kind(kind_name, d_h, cfg.density_exponent)
    family = init_family(kind, d_h, cfg.d_omega, rng.child(0), policy=INIT_PROBE)
    h0 = rng.child(1).normal(d_h)
    return [gram(wi, wj, family, h0) for wi, wj in cfg.word_pairs]


def gram_stats(kind_name: str, d_h: int, cfg: GramProbeConfig) -> list[dict]:
    """Median and IQR of |gram - delta| per word pair over cfg.trials."""
    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(lambda t: gram_trial(kind_name, d_h, cfg, t),
                                   range(cfg.trials)))
    else:
        values = [gram_trial(kind_name, d_h, cfg, t) for t in range(cfg.trials)]
    arr = np.asarray(values)
    rows = []
    for col, (wi, wj) in enumerate(cfg.word_pairs):
        delta = 1.0 if wi == wj else 0.0
        dev = np.abs(arr[:, col] - delta)
        q1, q3 = np.percentile(dev, (25, 75))
        rows.append({
            "kind": kind_name, "d_h": d_h,
            "word_i": "".join(map(str, wi)) or "e",
            "word_j": "".join(map(str, wj)) or "e",
            "median_gram": float(np.median(arr[:, col])),
            "median_abs_dev": float(np.median(dev)),
            "iqr": float(q3 - q1),
        })
    return rows


def gram_sweep(cfg: GramProbeConfig) -> list[dict]:
    rows = []
    for kind_name in cfg.kinds:
        for d_h in cfg.dims:
            rows.extend(gram_stats(kind_name, d_h, cfg))
    return rows


# ---------------------------------------------------------------------------
# Log-ODE convergence order
# ---------------------------------------------------------------------------

@dataclass
class OrderProbeConfig:
    """Fixed multiscale probe path: octave sum of sines with amplitude
    proportional to scale, which keeps window signatures in the generic
    O(w^N) regime (literal C^inf paths superconverge)."""

    n_fine: int = 1024
    octaves: int = 8
    amplitude: float = 0.5
    phase_pairs: tuple = ((0.9, 0.7), (0.3, 1.9), (1.7, 0.2))
    widths: tuple[int, ...] = (64, 32, 16, 8)
    depths: tuple[int, ...] = (1, 2)
    d_h: int = 4
    matrix_scale: float = 0.5
    seed: int = 11


def order_probe_path(cfg: OrderProbeConfig, phases: tuple[float, float]) -> np.ndarray:
    t = np.linspace(0.0, 1.0, cfg.n_fine + 1)
    p1, p2 = phases
    js = np.arange(1, cfg.octaves + 1)
    w1 = sum(2.0 ** (-j) * np.sin(2 * np.pi * 2 ** j * t + p1 * j) for j in js)
    w2 = sum(2.0 ** (-j) * np.cos(2 * np.pi * 2 ** j * t + p2 + 1.3 * j) for j in js)
    return np.diff(np.stack([w1, w2], axis=1) * cfg.amplitude, axis=0)


def order_probe_family(cfg: OrderProbeConfig, kind_name: str = DENSE) -> tuple:
    rng = Rng(cfg.seed)
    family = init_family(probe_kind(kind_name, cfg.d_h), cfg.d_h, 2, rng)
    for m in family.matrices:
        m.params *= cfg.matrix_scale
    return family, rng.child(1).normal(cfg.d_h)


def logode_order_probe(cfg: OrderProbeConfig, kind_name: str = DENSE) -> dict:
    """Errors per (depth, width), averaged over the fixed phase trio, plus
    fitted log-log slopes per depth."""
    family, h0 = order_probe_family(cfg, kind_name)
    rows = []
    slopes = {}
    for depth in cfg.depths:
        avg = np.zeros(len(cfg.widths))
        for phases in cfg.phase_pairs:
            inc = order_probe_path(cfg, phases)
            ref = flows.scan_sequential(family, inc, h0, order=flows.EXPONENTIAL)[-1]
            for wi, w in enumerate(cfg.widths):
                states = logsig.hybrid_solve(family, inc, w, depth, h0)
                avg[wi] += np.linalg.norm(states[-1] - ref)
        avg /= len(cfg.phase_pairs)
        slope = float(np.polyfit(np.log(cfg.widths), np.log(np.maximum(avg, 1e-300)), 1)[0])
        slopes[depth] = slope
        for w, err in zip(cfg.widths, avg):
            rows.append({"kind": kind_name, "depth": depth, "width": w,
                         "error": float(err), "slope": slope})
    return {"rows": rows, "slopes": slopes}


def diagonal_depth_invariance(cfg: OrderProbeConfig) -> float:
    """Max |depth2 - depth1| boundary-state gap for a diagonal family; the
    brackets vanish so this is floating-point zero."""
    rng = Rng(cfg.seed)
    family = init_family(kind_of(DIAGONAL), cfg.d_h, 2, rng)
    h0 = rng.child(1).normal(cfg.d_h)
    inc = order_probe_path(cfg, cfg.phase_pairs[0])
    a = logsig.hybrid_solve(family, inc, cfg.widths[-1], 1, h0)
    b = logsig.hybrid_solve(family, inc, cfg.widths[-1], 2, h0)
    return relative_error(b, a)


# ---------------------------------------------------------------------------
# Scan equivalence / structure-closure profiling
# ---------------------------------------------------------------------------

ALL_PROBE_KINDS = (DENSE, DIAGONAL, DPLR, BLOCK_DIAGONAL, SPARSE, WALSH_HADAMARD)


def scan_equivalence_probe(seeds: int = 20, n_max: int = 1024, d_h: int = 64,
                           d_omega: int = 2, base_seed: int = 0) -> list[dict]:
    """Max relative parallel-vs-sequential state error per kind."""
    rows = []
    for kind_name in ALL_PROBE_KINDS:
        worst = 0.0
        for s in range(seeds):
            rng = Rng(base_seed).child(hash(kind_name) % 5000).child(s)
            n = n_max if s == 0 else int(rng.child(0).integers(1, n_max))
            dim = d_h
            kind = probe_kind(kind_name, dim)
            fam = init_family(kind, dim, d_omega, rng.child(1))
            inc = rng.child(2).normal((n, d_omega), std=0.5 / np.sqrt(max(n, 1)))
            h0 = rng.child(3).normal(dim)
            seq = flows.scan_sequential(fam, inc, h0)
            par = flows.scan_parallel(fam, inc, h0)
            worst = max(worst, relative_error(par, seq))
        rows.append({"kind": kind_name, "seeds": seeds, "n_max": n_max,
                     "d_h": d_h, "max_rel_error": worst})
    return rows


def profile_probe(n: int = 64, d_h: int = 16, d_omega: int = 2,
                  seed: int = 0) -> list[dict]:
    """Instrumented dense-materialization and combine counts per kind."""
    rows = []
    for kind_name in ALL_PROBE_KINDS:
        rng = Rng(seed).child(hash(kind_name) % 5000)
        kind = probe_kind(kind_name, d_h)
        fam = init_family(kind, d_h, d_omega, rng.child(0))
        inc = rng.child(1).normal((n, d_omega), std=0.1)
        h0 = rng.child(2).normal(d_h)
        flows.reset_counters()
        flows.scan_parallel(fam, inc, h0)
        counters = flows.counters()
        rows.append({"kind": kind_name, "n": n, "d_h": d_h,
                     "dense_materializations": counters["dense_materializations"],
                     "combine_ops": counters["combine_ops"],
                     "combine_rounds": counters["combine_rounds"]})
    return rows
