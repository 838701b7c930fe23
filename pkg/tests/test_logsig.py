import itertools

import numpy as np
import pytest

from slicekit import logsig as ls
from slicekit import structured as st
from slicekit import flows
from slicekit.expm import expm
from slicekit.linalg import relative_error
from slicekit.rng import Rng


# ---------------------------------------------------------------------------
# Independent oracle: tensor algebra on word dictionaries
# ---------------------------------------------------------------------------

def dict_product(a, b, depth):
    out = {}
    for wa, ca in a.items():
        for wb, cb in b.items():
            w = wa + wb
            if len(w) <= depth:
                out[w] = out.get(w, 0.0) + ca * cb
    return out

def dict_exp(x, depth):
    out = {(): 1.0}
    power = {(): 1.0}
    fact = 1.0
    for k in range(1, depth + 1):
        power = dict_product(power, x, depth)
        fact *= k
        for w, c in power.items():
            out[w] = out.get(w, 0.0) + c / fact
    return out

def dict_log(t, depth):
    x = {w: c for w, c in t.items() if w != ()}
    out = {}
    power = dict(x)
    for k in range(1, depth + 1):
        for w, c in power.items():
            out[w] = out.get(w, 0.0) + ((-1.0) ** (k + 1) / k) * c
        power = dict_product(power, x, depth)
    return out

def dict_signature(increments, depth):
    sig = {(): 1.0}
    for row in increments:
        seg = dict_exp({(i,): float(v) for i, v in enumerate(row)}, depth)
        sig = dict_product(sig, seg, depth)
    return sig

def poly_to_dict(t):
    out = {(): t.levels[0]}
    for m in range(1, t.depth + 1):
        for word in itertools.product(range(t.d_omega), repeat=m):
            c = t.levels[m][word]
            if c != 0.0:
                out[word] = c
    return out

def dicts_close(a, b, tol):
    words = set(a) | set(b)
    return all(abs(a.get(w, 0.0) - b.get(w, 0.0)) <= tol for w in words)


# ---------------------------------------------------------------------------
# Basis
# ---------------------------------------------------------------------------

def is_lyndon(w):
    rotations = [w[i:] + w[:i] for i in range(1, len(w))]
    return all(w < r for r in rotations)


def test_lyndon_enumeration_matches_definition():
    for alphabet, depth in ((2, 4), (3, 3), (4, 2)):
        got = set(ls.lyndon_words(alphabet, depth))
        want = {w for m in range(1, depth + 1)
                for w in itertools.product(range(alphabet), repeat=m) if is_lyndon(w)}
        assert got == want


@pytest.mark.parametrize("alphabet,depth,count", [(2, 2, 3), (2, 3, 5), (3, 2, 6)])
def test_witt_formula_frozen_values(alphabet, depth, count):
    assert ls.witt_dimension(alphabet, depth) == count
    assert len(ls.HallBasis(alphabet, depth)) == count


def test_witt_matches_enumeration_up_to_four():
    for alphabet in range(1, 5):
        for depth in range(1, 5):
            assert len(ls.lyndon_words(alphabet, depth)) == ls.witt_dimension(alphabet, depth)


def test_basis_letters_first():
    basis = ls.HallBasis(3, 3)
    for i in range(3):
        assert basis.elements[i].word == (i,)
        assert basis.elements[i].left is None


def test_expansion_unitriangular():
    basis = ls.HallBasis(2, 4)
    for k, el in enumerate(basis.elements):
        exp = basis.expansion(k)
        m = len(el.word)
        assert exp[el.word] == 1.0 if m > 1 else exp[el.word[0]] == 1.0
        for word in itertools.product(range(2), repeat=m):
            if word < el.word and m > 1:
                assert exp[word] == 0.0


# ---------------------------------------------------------------------------
# Tensor algebra
# ---------------------------------------------------------------------------

def test_chen_with_unit():
    rng = Rng(1)
    t = ls.segment_signature(rng.normal(3), 3)
    u = ls.TensorPoly.unit(3, 3)
    left = ls.chen_product(u, t)
    right = ls.chen_product(t, u)
    for m in range(4):
        assert np.allclose(left.levels[m], t.levels[m])
        assert np.allclose(right.levels[m], t.levels[m])


def test_chen_one_dimensional_segments():
    p, q = 0.7, -0.3
    sig = ls.chen_product(ls.segment_signature(np.array([p]), 3),
                          ls.segment_signature(np.array([q]), 3))
    assert np.isclose(sig.levels[1][0], p + q)
    assert np.isclose(sig.levels[2][0, 0], (p + q) ** 2 / 2)


def test_chen_depth2_area_words():
    sig = ls.chen_product(ls.segment_signature(np.array([1.0, 0.0]), 2),
                          ls.segment_signature(np.array([0.0, 1.0]), 2))
    assert np.isclose(sig.levels[2][0, 1], 1.0)
    assert np.isclose(sig.levels[2][1, 0], 0.0)


def test_chen_matches_dict_oracle():
    rng = Rng(2)
    inc = rng.normal((4, 2), std=0.8)
    got = poly_to_dict(ls.path_signature(inc, 3))
    want = dict_signature(inc, 3)
    assert dicts_close(got, want, 1e-12)


def test_segment_signature_zero_is_unit():
    t = ls.segment_signature(np.zeros(2), 3)
    assert t.levels[0] == 1.0
    for m in range(1, 4):
        assert not t.levels[m].any()


def test_segment_signature_one_dimensional_series():
    h = 0.5
    t = ls.segment_signature(np.array([h]), 3)
    assert np.isclose(t.levels[1][0], h)
    assert np.isclose(t.levels[2][0, 0], h * h / 2)
    assert np.isclose(t.levels[3][0, 0, 0], h ** 3 / 6)


def test_segment_signature_2d_word12():
    t = ls.segment_signature(np.array([1.0, 2.0]), 2)
    assert np.isclose(t.levels[2][0, 1], 1.0)


def test_log_exp_identity_group_like():
    rng = Rng(3)
    for depth in (2, 3, 4):
        inc = rng.child(depth).normal((3, 2), std=0.6)
        sig = ls.path_signature(inc, depth)
        back = ls.tensor_exp(ls.tensor_log(sig))
        for m in range(depth + 1):
            assert np.allclose(back.levels[m], sig.levels[m], atol=1e-12)


# ---------------------------------------------------------------------------
# Log-signature
# ---------------------------------------------------------------------------

def test_logsig_single_segment():
    dw = np.array([0.4, -1.1])
    sig = ls.log_signature(dw[None, :], 2)
    assert np.allclose(sig.level_one(), dw)
    assert np.allclose(sig.coeffs[2:], 0.0, atol=1e-15)


def test_logsig_bch_half_bracket():
    fwd = ls.log_signature(np.array([[1.0, 0.0], [0.0, 1.0]]), 2)
    assert np.allclose(fwd.level_one(), [1.0, 1.0])
    assert np.isclose(fwd.coeffs[2], 0.5)
    rev = ls.log_signature(np.array([[0.0, 1.0], [1.0, 0.0]]), 2)
    assert np.isclose(rev.coeffs[2], -0.5)


def test_logsig_matches_dict_oracle_depth3():
    rng = Rng(5)
    basis = ls.HallBasis(2, 3)
    for trial in range(10):
        inc = rng.child(trial).normal((5, 2), std=0.5)
        sig = ls.log_signature(inc, 3, basis)
        want = dict_log(dict_signature(inc, 3), 3)
        # reconstruct tensor coefficients from hall coordinates
        recon = {}
        for k in range(len(basis)):
            exp = basis.expansion(k)
            m = len(basis.elements[k].word)
            for word in itertools.product(range(2), repeat=m):
                c = sig.coeffs[k] * (exp[word] if m > 1 else exp[word[0]])
                if c != 0.0:
                    recon[word] = recon.get(word, 0.0) + c
        assert dicts_close(recon, want, 1e-10)


def test_logsig_depth_cap():
    with pytest.raises(ValueError):
        ls.log_signature(np.zeros((2, 2)), 4)


# ---------------------------------------------------------------------------
# Lifting
# ---------------------------------------------------------------------------

def test_diagonal_lift_brackets_vanish():
    fam = st.init_family(st.kind_of(st.DIAGONAL), 5, 2, Rng(6))
    basis = ls.HallBasis(2, 3)
    lifted = ls.lift_vector_fields(fam, basis)
    for k, el in enumerate(basis.elements):
        if el.left is not None:
            assert np.allclose(lifted[k], 0.0)


def test_hand_commutator():
    kind = st.kind_of(st.DENSE)
    a1 = st.StructuredMatrix(kind, 2, np.array([0.0, 1.0, 0.0, 0.0]))
    a2 = st.StructuredMatrix(kind, 2, np.array([0.0, 0.0, 1.0, 0.0]))
    fam = st.ChannelFamily(kind, 2, [a1, a2])
    lifted = ls.lift_vector_fields(fam, ls.HallBasis(2, 2))
    assert np.array_equal(lifted[2], np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_lift_matches_direct_commutator():
    rng = Rng(7)
    fam = st.init_family(st.kind_of(st.DENSE), 3, 2, rng)
    a, b = fam.matrices[0].materialize(), fam.matrices[1].materialize()
    lifted = ls.lift_vector_fields(fam, ls.HallBasis(2, 2))
    assert np.array_equal(lifted[2], a @ b - b @ a)


def test_jacobi_identity_of_lifts():
    rng = Rng(8)
    for trial in range(5):
        r = rng.child(trial)
        a, b, c = (r.child(i).normal((4, 4)) for i in range(3))
        br = lambda x, y: x @ y - y @ x
        total = br(br(a, b), c) + br(br(b, c), a) + br(br(c, a), b)
        assert np.max(np.abs(total)) <= 1e-12 * max(1.0, np.max(np.abs(a)) ** 3) * 100


# ---------------------------------------------------------------------------
# Log-ODE flow and the hybrid solver
# ---------------------------------------------------------------------------

def test_logode_depth1_reduces_to_exponential_flow():
    rng = Rng(9)
    fam = st.init_family(st.kind_of(st.DENSE), 4, 2, rng)
    dw = rng.child(1).normal(2, std=0.4)
    got = ls.logode_flow(fam, ls.log_signature(dw[None, :], 1)).materialize()
    want = flows.build_flow(fam, dw, order=flows.EXPONENTIAL).materialize()
    assert relative_error(got, want) <= 1e-13


def test_logode_diagonal_depth2_equals_depth1():
    rng = Rng(10)
    fam = st.init_family(st.kind_of(st.DIAGONAL), 6, 2, rng)
    inc = rng.child(3).normal((4, 2), std=0.3)
    f1 = ls.logode_flow(fam, ls.log_signature(inc, 1))
    f2 = ls.logode_flow(fam, ls.log_signature(inc, 2))
    assert relative_error(f2.diag, f1.diag) <= 1e-12


def reference_states(fam, increments, h0):
    """Exact solution for the piecewise-linear path: exponential per segment."""
    return flows.scan_sequential(fam, increments, h0, order=flows.EXPONENTIAL)


def test_logode_depth2_beats_depth1_on_halving():
    rng = Rng(11)
    fam = st.init_family(st.kind_of(st.DENSE), 4, 2, rng)
    for m in fam.matrices:
        m.params *= 0.5
    n = 1024
    t = np.linspace(0.0, 1.0, n + 1)
    js = np.arange(1, 9)
    path = np.stack(
        [sum(2.0 ** (-j) * np.sin(2 * np.pi * 2 ** j * t) for j in js),
         sum(2.0 ** (-j) * np.cos(2 * np.pi * 2 ** j * t + 0.7) for j in js)],
        axis=1)
    inc = np.diff(path, axis=0)
    h0 = rng.child(1).normal(4)
    ref = reference_states(fam, inc, h0)[-1]

    def boundary_error(window, depth):
        out = ls.hybrid_solve(fam, inc, window, depth, h0)
        return np.linalg.norm(out[-1] - ref)

    e1_w16 = boundary_error(16, 1)
    e2_w16 = boundary_error(16, 2)
    e2_w8 = boundary_error(8, 2)
    assert e2_w16 <= e1_w16
    assert e2_w16 / max(e2_w8, 1e-300) >= 3.4  # roughly second-order gain when halving


def test_hybrid_window1_depth1_matches_exponential_scan():
    rng = Rng(12)
    fam = st.init_family(st.kind_of(st.DENSE), 4, 2, rng)
    inc = rng.child(1).normal((8, 2), std=0.3)
    h0 = rng.child(2).normal(4)
    got = ls.hybrid_solve(fam, inc, 1, 1, h0)
    want = flows.scan_parallel(fam, inc, h0, order=flows.EXPONENTIAL)
    assert relative_error(got, want) <= 1e-12


def test_hybrid_diagonal_equals_exact_diag_exponentials():
    rng = Rng(13)
    fam = st.init_family(st.kind_of(st.DIAGONAL), 5, 2, rng)
    inc = rng.child(1).normal((12, 2), std=0.4)
    h0 = rng.child(2).normal(5)
    got = ls.hybrid_solve(fam, inc, 3, 2, h0)
    # closed form: product of exp(sum dw a) per step, evaluated at boundaries
    stack = np.stack([m.params for m in fam.matrices])
    factors = np.exp(inc @ stack)
    states = [h0]
    h = h0.copy()
    for j in range(12):
        h = factors[j] * h
        states.append(h.copy())
    want = np.stack(states[::3])
    assert relative_error(got, want) <= 1e-12


def test_hybrid_ragged_tail():
    rng = Rng(14)
    fam = st.init_family(st.kind_of(st.DENSE), 3, 2, rng)
    inc = rng.child(1).normal((7, 2), std=0.2)
    h0 = rng.child(2).normal(3)
    out = ls.hybrid_solve(fam, inc, 4, 2, h0)
    assert out.shape == (3, 3)  # windows [0:4], [4:7] plus the initial state


# ---------------------------------------------------------------------------
# Matrix exponential
# ---------------------------------------------------------------------------

def taylor_expm(a, terms=40, scal=32):
    out = np.eye(a.shape[0])
    term = np.eye(a.shape[0])
    b = a / scal
    for k in range(1, terms):
        term = term @ b / k
        out = out + term
    for _ in range(int(np.log2(scal))):
        out = out @ out
    return out


def test_expm_matches_taylor_oracle():
    rng = Rng(15)
    for trial in range(10):
        a = rng.child(trial).normal((6, 6), std=1.5)
        assert relative_error(expm(a), taylor_expm(a)) <= 1e-12


def test_expm_large_norm_requires_squaring():
    rng = Rng(16)
    a = rng.child(0).normal((5, 5), std=4.0)
    assert relative_error(expm(a), taylor_expm(a, terms=60, scal=1024)) <= 1e-10
