"""State-tracking benchmark generators.

A5: compose even permutations of five elements, label every prefix with
the index of its running product. Regular-language tasks: cycle
navigation (mod-5 walk), even pairs (transition-count parity), modular
arithmetic without brackets (mod 5, multiplication binds tighter), and
parity (popcount mod 2). All generators are pure functions of (seed,
length); labels are per-position running states so token-tagging losses
apply uniformly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng


def _permutation_parity(p) -> int:
    seen = [False] * len(p)
    parity = 0
    for i in range(len(p)):
        if seen[i]:
            continue
        j, clen = i, 0
        while not seen[j]:
            seen[j] = True
            j = p[j]
            clen += 1
        parity ^= (clen - 1) & 1
    return parity


def a5_elements() -> list[tuple[int, ...]]:
    """The 60 even permutations of {0..4}, lexicographic one-line order.

    This ordering is frozen: element index = position in this list."""
    return [p for p in itertools.permutations(range(5)) if _permutation_parity(p) == 0]


_A5 = a5_elements()
_A5_INDEX = {p: i for i, p in enumerate(_A5)}


def a5_compose(i: int, j: int) -> int:
    """Index of p_i after p_j (p_j applied first)."""
    pi, pj = _A5[i], _A5[j]
    return _A5_INDEX[tuple(pi[pj[x]] for x in range(5))]


def a5_cayley_table() -> np.ndarray:
    table = np.empty((60, 60), dtype=np.int64)
    for i in range(60):
        for j in range(60):
            table[i, j] = a5_compose(i, j)
    return table


_CAYLEY = None


def _cayley() -> np.ndarray:
    global _CAYLEY
    if _CAYLEY is None:
        _CAYLEY = a5_cayley_table()
    return _CAYLEY


@dataclass
class TaskInstance:
    tokens: np.ndarray
    labels: np.ndarray
    task_id: str

    def __post_init__(self):
        if self.tokens.shape != self.labels.shape:
            raise ValueError("tokens and labels must align position-wise")


@dataclass
class TaskSpec:
    """Vocabulary/label sizes plus the per-instance generator."""

    task_id: str
    vocab_size: int
    n_classes: int
    generate: "callable" = field(repr=False, default=None)


def a5_generate(rng: Rng, length: int) -> TaskInstance:
    """Uniform A5 word; label j = index of the product of tokens 0..j
    (earlier tokens applied first)."""
    if not 2 <= length:
        raise ValueError("A5 sequences need length >= 2")
    table = _cayley()
    tokens = rng.integers(0, 59, length).astype(np.int64)
    labels = np.empty(length, dtype=np.int64)
    acc = int(tokens[0])
    labels[0] = acc
    for j in range(1, length):
        acc = int(table[acc, int(tokens[j])])
        labels[j] = acc
    return TaskInstance(tokens=tokens, labels=labels, task_id="a5")


def cycle_navigation(rng: Rng, length: int) -> TaskInstance:
    """Walk on a 5-cycle; tokens 0/1/2 decode to moves +1/0/-1, labels are
    the running position mod 5."""
    if length < 1:
        raise ValueError("need length >= 1")
    tokens = rng.integers(0, 2, length).astype(np.int64)
    moves = np.array([1, 0, -1])[tokens]
    labels = np.mod(np.cumsum(moves), 5).astype(np.int64)
    return TaskInstance(tokens=tokens, labels=labels, task_id="cycle_navigation")


def even_pairs(rng: Rng, length: int) -> TaskInstance:
    """Binary string; label j = 1 iff the number of adjacent transitions in
    tokens 0..j is even (equivalently tokens[0] == tokens[j])."""
    if length < 1:
        raise ValueError("need length >= 1")
    tokens = rng.integers(0, 1, length).astype(np.int64)
    labels = (tokens == tokens[0]).astype(np.int64)
    return TaskInstance(tokens=tokens, labels=labels, task_id="even_pairs")


MOD_ARITH_VOCAB = 8  # digits 0..4, then '+', '-', '*'
OP_ADD, OP_SUB, OP_MUL = 5, 6, 7


def mod_arith_nobrackets(rng: Rng, length: int, ops=(OP_ADD, OP_SUB, OP_MUL)) -> TaskInstance:
    """Alternating digit/operator expression over Z5 with multiplication
    binding tighter; label at a digit = value of the prefix ending there,
    label at an operator repeats the previous value."""
    if length < 1 or length % 2 == 0:
        raise ValueError("expressions alternate digit/op, so length is odd")
    ops = tuple(ops)
    tokens = np.empty(length, dtype=np.int64)
    labels = np.empty(length, dtype=np.int64)
    total, term, sign = 0, int(rng.integers(0, 4)), 1
    tokens[0] = term
    labels[0] = term % 5
    for pos in range(1, length, 2):
        op = ops[rng.one_of(len(ops))]
        digit = int(rng.integers(0, 4))
        tokens[pos] = op
        tokens[pos + 1] = digit
        labels[pos] = labels[pos - 1]
        if op == OP_MUL:
            term = (term * digit) % 5
        else:
            total = (total + sign * term) % 5
            sign = 1 if op == OP_ADD else -1
            term = digit
        labels[pos + 1] = (total + sign * term) % 5
    return TaskInstance(tokens=tokens, labels=labels, task_id="mod_arith")


def parity(rng: Rng, length: int) -> TaskInstance:
    if length < 1:
        raise ValueError("need length >= 1")
    tokens = rng.integers(0, 1, length).astype(np.int64)
    labels = np.mod(np.cumsum(tokens), 2).astype(np.int64)
    return TaskInstance(tokens=tokens, labels=labels, task_id="parity")


TASKS = {
    "a5": TaskSpec("a5", 60, 60, a5_generate),
    "cycle_navigation": TaskSpec("cycle_navigation", 3, 5, cycle_navigation),
    "even_pairs": TaskSpec("even_pairs", 2, 2, even_pairs),
    "mod_arith": TaskSpec("mod_arith", MOD_ARITH_VOCAB, 5, mod_arith_nobrackets),
    "parity": TaskSpec("parity", 2, 2, parity),
}


def task_spec(task_id: str) -> TaskSpec:
    if task_id not in TASKS:
        raise KeyError(f"unknown task {task_id!r}; choose from {sorted(TASKS)}")
    return TASKS[task_id]


@dataclass
class LengthSampler:
    low: int
    high: int

    def draw(self, rng: Rng, parity_odd: bool = False) -> int:
        n = int(rng.integers(self.low, self.high))
        if parity_odd and n % 2 == 0:
            n = n + 1 if n + 1 <= self.high else n - 1
        return n


def length_split(task_id: str, train_range: tuple[int, int] | None = None,
                 eval_range: tuple[int, int] | None = None):
    """Train/eval length samplers. Defaults follow the benchmark protocols:
    regular-language tasks train on [3, 40] and evaluate on [40, 256]; the
    A5 protocol shares [3, 20] for both sides. Explicit ranges override."""
    if train_range is None:
        train_range = (3, 20) if task_id == "a5" else (3, 40)
    if eval_range is None:
        eval_range = (3, 20) if task_id == "a5" else (40, 256)
    if train_range[0] > train_range[1] or eval_range[0] > eval_range[1]:
        raise ValueError("length ranges must be ordered")
    return LengthSampler(*train_range), LengthSampler(*eval_range)


def sample_batch(task_id: str, rng: Rng, batch: int, sampler: LengthSampler,
                 len2_fraction: float = 0.0):
    """Padded batch (tokens, labels, lengths) with labels -1 past each
    sequence's end. A fraction of length-2 sequences can be mixed in, the
    convergence aid used for group-composition training."""
    spec = task_spec(task_id)
    odd = task_id == "mod_arith"
    insts = []
    n_short = int(batch * len2_fraction) if task_id == "a5" else 0
    for k in range(batch):
        r = rng.child(k)
        n = 2 if k < n_short else sampler.draw(r.child(0), parity_odd=odd)
        insts.append(spec.generate(r.child(1), n))
    t_max = max(len(i.tokens) for i in insts)
    tokens = np.zeros((batch, t_max), dtype=np.int64)
    labels = np.full((batch, t_max), -1, dtype=np.int64)
    lengths = np.empty(batch, dtype=np.int64)
    for k, inst in enumerate(insts):
        n = len(inst.tokens)
        tokens[k, :n] = inst.tokens
        labels[k, :n] = inst.labels
        lengths[k] = n
    return tokens, labels, lengths


def dump_instances(task_id: str, rng: Rng, count: int, sampler: LengthSampler):
    """`tokens<TAB>labels` lines, space-separated ids (dataset dump format)."""
    spec = task_spec(task_id)
    odd = task_id == "mod_arith"
    lines = []
    for k in range(count):
        r = rng.child(k)
        n = sampler.draw(r.child(0), parity_odd=odd)
        inst = spec.generate(r.child(1), n)
        lines.append(" ".join(map(str, inst.tokens.tolist())) + "\t"
                     + " ".join(map(str, inst.labels.tolist())))
    return lines
