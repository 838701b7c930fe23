import numpy as np
import pytest

from slicekit import hadamard
from slicekit.linalg import relative_error
from slicekit.rng import Rng


def test_order_one():
    assert np.array_equal(hadamard.sylvester(1), np.array([[1]]))


def test_order_two_base_case():
    assert np.array_equal(hadamard.sylvester(2), np.array([[1, 1], [1, -1]]))


def test_orthogonality_exact_integer():
    for n in (1, 2, 4, 8, 16, 32, 64, 128, 256):
        h = hadamard.sylvester(n)
        assert h.dtype == np.int64
        assert np.array_equal(h @ h.T, n * np.eye(n, dtype=np.int64))


def test_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        hadamard.sylvester(6)
    with pytest.raises(ValueError):
        hadamard.fwht(np.zeros(3))


def test_fwht_basis_vector():
    e0 = np.zeros(4)
    e0[0] = 1.0
    assert np.array_equal(hadamard.fwht(e0), np.ones(4))


def test_fwht_dim_one_identity():
    v = np.array([3.25])
    assert np.array_equal(hadamard.fwht(v), v)


def test_fwht_matches_dense_multiply():
    rng = Rng(5)
    for n in (1, 2, 4, 8, 16, 64, 256):
        h = hadamard.sylvester(n).astype(np.float64)
        for trial in range(50):
            v = rng.child(n * 1000 + trial).normal(n)
            assert relative_error(hadamard.fwht(v), h @ v) <= 1e-12
            assert relative_error(hadamard.fwht(v, normalize=True), h @ v / np.sqrt(n)) <= 1e-12


def test_normalized_involution_and_norm():
    rng = Rng(6)
    v = rng.normal(64)
    w = hadamard.fwht(v, normalize=True)
    assert abs(np.linalg.norm(w) - np.linalg.norm(v)) <= 1e-12 * np.linalg.norm(v)
    back = hadamard.fwht(w, normalize=True)
    assert relative_error(back, v) <= 1e-12


def test_add_count_is_n_log_n():
    rng = Rng(8)
    for n in (2, 8, 64, 256):
        v = rng.normal(n)
        hadamard.reset_add_count()
        hadamard.fwht(v)
        assert hadamard.add_count() == n * int(np.log2(n))
