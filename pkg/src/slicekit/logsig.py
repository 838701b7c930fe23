"""Truncated log-signatures over a Lyndon (Hall) basis and the Log-ODE flow.

The free-Lie-algebra basis is realized by Lyndon words with standard
bracketing: for a Lyndon word w with standard factorization w = uv, the
basis element is [P_u, P_v]. Expansions of these elements in the tensor
algebra are unitriangular against lexicographic word order, which gives a
direct extraction of log-signature coordinates from the tensor logarithm.

Channel indices in public `Word`s are 1-based, matching the usual
alphabet convention; everything internal is 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flows
from .expm import expm
from .structured import BLOCK_DIAGONAL, DIAGONAL, ChannelFamily

MAX_ENGINE_DEPTH = 3  # Log-ODE path cap; tensor/basis machinery is depth-agnostic


# ---------------------------------------------------------------------------
# Lyndon words
# ---------------------------------------------------------------------------

def lyndon_words(alphabet: int, max_len: int) -> list[tuple[int, ...]]:
    """All Lyndon words over {0..alphabet-1} up to max_len, by (length, lex)."""
    words = []
    w = [-1]
    while w:
        w[-1] += 1
        m = len(w)
        if m <= max_len:
            words.append(tuple(w))
        while len(w) < max_len:
            w.append(w[len(w) - m])
        while w and w[-1] == alphabet - 1:
            w.pop()
    return sorted(words, key=lambda t: (len(t), t))


def _standard_factorization(word: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Split w = uv with v the longest proper Lyndon suffix."""
    n = len(word)
    for i in range(1, n):
        suffix = word[i:]
        if all(suffix < suffix[j:] for j in range(1, len(suffix))):
            return word[:i], suffix
    raise ValueError(f"{word} has no standard factorization")


def _mobius(n: int) -> int:
    if n == 1:
        return 1
    mu, m, p = 1, n, 2
    while p * p <= m:
        if m % p == 0:
            m //= p
            if m % p == 0:
                return 0
            mu = -mu
        p += 1
    if m > 1:
        mu = -mu
    return mu


def witt_dimension(alphabet: int, depth: int) -> int:
    """Number of Hall-basis elements up to the given depth."""
    total = 0
    for m in range(1, depth + 1):
        s = 0
        for d in range(1, m + 1):
            if m % d == 0:
                s += _mobius(d) * alphabet ** (m // d)
        total += s // m
    return total


@dataclass(frozen=True)
class Word:
    """Channel word with 1-based letters."""

    letters: tuple[int, ...]

    def __post_init__(self):
        if any(k < 1 for k in self.letters):
            raise ValueError("word letters are 1-based channel indices")

    def __len__(self):
        return len(self.letters)


@dataclass
class BasisElement:
    word: tuple[int, ...]          # 0-based Lyndon word
    left: int | None = None        # index of [left, right] factors; None for letters
    right: int | None = None


@dataclass
class HallBasis:
    """Lyndon-realized Hall basis of the truncated free Lie algebra."""

    d_omega: int
    depth: int
    elements: list[BasisElement] = field(default_factory=list)

    def __post_init__(self):
        if self.d_omega < 1 or self.depth < 1:
            raise ValueError("need d_omega >= 1 and depth >= 1")
        if not self.elements:
            words = lyndon_words(self.d_omega, self.depth)
            index = {w: i for i, w in enumerate(words)}
            for w in words:
                if len(w) == 1:
                    self.elements.append(BasisElement(word=w))
                else:
                    u, v = _standard_factorization(w)
                    self.elements.append(BasisElement(word=w, left=index[u], right=index[v]))
        if len(self.elements) != witt_dimension(self.d_omega, self.depth):
            raise AssertionError("Lyndon enumeration disagrees with the Witt formula")

    def __len__(self):
        return len(self.elements)

    def expansion(self, k: int) -> np.ndarray:
        """Tensor-algebra expansion of basis element k at level len(word)."""
        el = self.elements[k]
        if el.left is None:
            e = np.zeros(self.d_omega)
            e[el.word[0]] = 1.0
            return e
        a = self.expansion(el.left)
        b = self.expansion(el.right)
        return np.multiply.outer(a, b) - np.multiply.outer(b, a)


@dataclass
class LogSignature:
    basis: HallBasis
    coeffs: np.ndarray

    def level_one(self) -> np.ndarray:
        return self.coeffs[:self.basis.d_omega]


# ---------------------------------------------------------------------------
# Truncated tensor algebra
# ---------------------------------------------------------------------------

@dataclass
class TensorPoly:
    """Element of the tensor algebra truncated at `depth`: levels[m] has
    shape (d_omega,) * m, with levels[0] the scalar part."""

    d_omega: int
    depth: int
    levels: list

    @classmethod
    def zero(cls, d_omega: int, depth: int) -> "TensorPoly":
        levels = [np.zeros((d_omega,) * m) if m else 0.0 for m in range(depth + 1)]
        return cls(d_omega, depth, levels)

    @classmethod
    def unit(cls, d_omega: int, depth: int) -> "TensorPoly":
        out = cls.zero(d_omega, depth)
        out.levels[0] = 1.0
        return out

    def copy(self) -> "TensorPoly":
        return TensorPoly(self.d_omega, self.depth,
                          [lv if m == 0 else lv.copy() for m, lv in enumerate(self.levels)])

    def add(self, other: "TensorPoly", scale: float = 1.0) -> "TensorPoly":
        out = self.copy()
        out.levels[0] += scale * other.levels[0]
        for m in range(1, self.depth + 1):
            out.levels[m] += scale * other.levels[m]
        return out

    def word_coefficient(self, word: tuple[int, ...]) -> float:
        lv = self.levels[len(word)]
        return float(lv[word]) if word else float(lv)


def chen_product(a: TensorPoly, b: TensorPoly, depth: int | None = None) -> TensorPoly:
    """Truncated tensor-algebra product; concatenation identity for
    signatures of concatenated path segments."""
    if a.d_omega != b.d_omega:
        raise ValueError("operands live over different alphabets")
    depth = min(a.depth, b.depth) if depth is None else depth
    out = TensorPoly.zero(a.d_omega, depth)
    for m in range(depth + 1):
        acc = None
        for p in range(m + 1):
            term = np.multiply.outer(a.levels[p], b.levels[m - p])
            acc = term if acc is None else acc + term
        out.levels[m] = float(acc) if m == 0 else acc
    return out


def segment_signature(dw: np.ndarray, depth: int) -> TensorPoly:
    """Signature of one linear segment with increment dw: exp(dw)."""
    dw = np.asarray(dw, dtype=np.float64)
    out = TensorPoly.unit(dw.shape[0], depth)
    power = np.array(1.0)
    factorial = 1.0
    for m in range(1, depth + 1):
        power = np.multiply.outer(power, dw) if m > 1 else dw.copy()
        factorial *= m
        out.levels[m] = power / factorial
    return out


def tensor_log(t: TensorPoly) -> TensorPoly:
    """log of a group-like element (unit scalar part), truncated."""
    if abs(t.levels[0] - 1.0) > 1e-9:
        raise ValueError("tensor_log expects unit scalar part")
    x = t.copy()
    x.levels[0] = 0.0
    out = TensorPoly.zero(t.d_omega, t.depth)
    power = x.copy()
    for k in range(1, t.depth + 1):
        out = out.add(power, scale=(-1.0) ** (k + 1) / k)
        if k < t.depth:
            power = chen_product(power, x)
    return out


def tensor_exp(t: TensorPoly) -> TensorPoly:
    """exp of an element with zero scalar part, truncated."""
    if abs(t.levels[0]) > 1e-9:
        raise ValueError("tensor_exp expects zero scalar part")
    out = TensorPoly.unit(t.d_omega, t.depth)
    power = TensorPoly.unit(t.d_omega, t.depth)
    factorial = 1.0
    for k in range(1, t.depth + 1):
        power = chen_product(power, t)
        factorial *= k
        out = out.add(power, scale=1.0 / factorial)
    return out


# ---------------------------------------------------------------------------
# Log-signature of a piecewise-linear window
# ---------------------------------------------------------------------------

def path_signature(increments: np.ndarray, depth: int) -> TensorPoly:
    """Chen product of segment signatures over all increment rows."""
    increments = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    out = TensorPoly.unit(increments.shape[1], depth)
    for row in increments:
        out = chen_product(out, segment_signature(row, depth))
    return out


def log_signature(increments: np.ndarray, depth: int, basis: HallBasis | None = None) -> LogSignature:
    """Hall-coordinate log-signature of the piecewise-linear path with the
    given increments. Depth is capped at the engine limit."""
    increments = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    if not 1 <= depth <= MAX_ENGINE_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_ENGINE_DEPTH}], got {depth}")
    d_omega = increments.shape[1]
    if basis is None:
        basis = HallBasis(d_omega, depth)
    if basis.d_omega != d_omega or basis.depth < depth:
        raise ValueError("basis does not match the path alphabet/depth")
    log_t = tensor_log(path_signature(increments, depth))
    coeffs = np.zeros(len(basis))
    residual = [None] + [log_t.levels[m].copy() for m in range(1, depth + 1)]
    for k, el in enumerate(basis.elements):
        m = len(el.word)
        if m > depth:
            break
        lam = residual[m][el.word] if m > 1 else residual[m][el.word[0]]
        coeffs[k] = lam
        if lam != 0.0:
            residual[m] -= lam * basis.expansion(k)
    return LogSignature(basis=basis, coeffs=coeffs)


# ---------------------------------------------------------------------------
# Lie-bracket lifting and the Log-ODE flow
# ---------------------------------------------------------------------------

def lift_vector_fields(family: ChannelFamily, basis: HallBasis) -> list[np.ndarray]:
    """Dense lifted matrices: channels for letters, iterated commutators
    A_i A_j - A_j A_i for bracket elements."""
    if basis.d_omega != family.d_omega:
        raise ValueError("basis alphabet differs from the family channel count")
    lifted: list[np.ndarray] = []
    for el in basis.elements:
        if el.left is None:
            lifted.append(family.matrices[el.word[0]].materialize())
        else:
            a, b = lifted[el.left], lifted[el.right]
            lifted.append(a @ b - b @ a)
    return lifted


def _lift_diagonal(family: ChannelFamily, basis: HallBasis) -> list[np.ndarray]:
    d = family.d_h
    out = []
    for el in basis.elements:
        if el.left is None:
            out.append(family.matrices[el.word[0]].params)
        else:
            out.append(np.zeros(d))  # diagonal channels commute
    return out


def _lift_blocks(family: ChannelFamily, basis: HallBasis) -> list[list[np.ndarray]]:
    per_matrix = [list(m.iter_blocks()) for m in family.matrices]
    out: list[list[np.ndarray]] = []
    for el in basis.elements:
        if el.left is None:
            out.append([blk.copy() for blk in per_matrix[el.word[0]]])
        else:
            a, b = out[el.left], out[el.right]
            out.append([x @ y - y @ x for x, y in zip(a, b)])
    return out


def flow_degree_signs(basis: HallBasis) -> np.ndarray:
    """Per-element sign (-1)^(degree-1) pairing log-signature coordinates
    with matrix-commutator lifts.

    Linear vector fields bracket as [V_A, V_B] = V_{-[A,B]}: the Lie map
    into flow generators is the antipode twist of the word homomorphism,
    which on a degree-m Lie basis element is the scalar (-1)^(m-1)."""
    return np.array([(-1.0) ** (len(el.word) - 1) for el in basis.elements])


def logode_flow(family: ChannelFamily, logsig: LogSignature,
                lifted: list | None = None) -> flows.FlowElement:
    """Interval map exp(sum_k signed lifted_k * lambda_k); stays diagonal /
    block-diagonal when the family does."""
    lam = logsig.coeffs * flow_degree_signs(logsig.basis)
    name = family.kind.name
    if name == DIAGONAL:
        vecs = _lift_diagonal(family, logsig.basis) if lifted is None else lifted
        acc = np.zeros(family.d_h)
        for k, v in enumerate(vecs):
            acc += lam[k] * v
        return flows.FlowElement(flows.REP_DIAG, family.d_h, diag=np.exp(acc))
    if name == BLOCK_DIAGONAL:
        blocks_lift = _lift_blocks(family, logsig.basis) if lifted is None else lifted
        sums = [np.zeros((b, b)) for b in family.kind.blocks]
        for k, blist in enumerate(blocks_lift):
            if lam[k] != 0.0:
                for j, blk in enumerate(blist):
                    sums[j] += lam[k] * blk
        return flows.FlowElement(flows.REP_BLOCK, family.d_h, blocks=[expm(s) for s in sums])
    mats = lift_vector_fields(family, logsig.basis) if lifted is None else lifted
    acc = np.zeros((family.d_h, family.d_h))
    for k, m in enumerate(mats):
        if lam[k] != 0.0:
            acc += lam[k] * m
    flows._count("dense_materializations")
    return flows.FlowElement(flows.REP_DENSE, family.d_h, dense=expm(acc))


def window_slices(n: int, width: int) -> list[slice]:
    if width < 1:
        raise ValueError("window width must be >= 1")
    return [slice(i, min(i + width, n)) for i in range(0, n, width)]


def hybrid_solve(family: ChannelFamily, increments: np.ndarray, window: int,
                 depth: int, h0: np.ndarray, basis: HallBasis | None = None) -> np.ndarray:
    """Log-ODE over fixed-width windows (ragged tail allowed), then a
    parallel scan over the window flows. Returns the window-boundary
    states, initial state first."""
    increments = np.atleast_2d(np.asarray(increments, dtype=np.float64))
    if basis is None:
        basis = HallBasis(increments.shape[1], depth)
    name = family.kind.name
    if name == DIAGONAL:
        lifted = _lift_diagonal(family, basis)
    elif name == BLOCK_DIAGONAL:
        lifted = _lift_blocks(family, basis)
    else:
        lifted = lift_vector_fields(family, basis)
    flow_list = []
    for sl in window_slices(increments.shape[0], window):
        lam = log_signature(increments[sl], depth, basis)
        flow_list.append(logode_flow(family, lam, lifted=lifted))
    return flows.scan_flow_elements(flow_list, h0)
