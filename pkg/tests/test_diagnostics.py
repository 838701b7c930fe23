import numpy as np
import pytest

from slicekit import diagnostics as dg, structured as st
from slicekit.rng import Rng


def test_gram_empty_words_norm():
    cfg = dg.GramProbeConfig(trials=50)
    rng = Rng(0)
    fam = st.init_family(dg.probe_kind(st.DENSE, 1024), 1024, 2, rng,
                         policy=st.INIT_PROBE)
    h0 = rng.child(1).normal(1024)
    val = dg.gram((), (), fam, h0)
    assert abs(val - 1.0) <= 5.0 / np.sqrt(1024)


def test_gram_dense_offdiagonal_small():
    cfg = dg.GramProbeConfig(trials=60, dims=(256,))
    rows = dg.gram_stats(st.DENSE, 256, cfg)
    row = next(r for r in rows if r["word_i"] == "1" and r["word_j"] == "2")
    assert row["median_abs_dev"] <= 3.0 / np.sqrt(256)


def test_gram_diagonal_commuting_witness():
    cfg = dg.GramProbeConfig(trials=60)
    rows = dg.gram_stats(st.DIAGONAL, 512, cfg)
    row = next(r for r in rows if r["word_i"] == "12" and r["word_j"] == "21")
    assert row["median_gram"] >= 0.8


def test_gram_matches_bruteforce_product():
    rng = Rng(3)
    fam = st.init_family(dg.probe_kind(st.DENSE, 16), 16, 2, rng, policy=st.INIT_PROBE)
    h0 = rng.child(1).normal(16)
    a1 = fam.matrices[0].materialize()
    a2 = fam.matrices[1].materialize()
    want = float((a1 @ (a2 @ h0)) @ (a2 @ (a1 @ h0))) / 16
    got = dg.gram((1, 2), (2, 1), fam, h0)
    assert np.isclose(got, want, rtol=1e-12)


def test_gram_word_length_cap():
    with pytest.raises(ValueError):
        dg.GramProbeConfig(word_pairs=(((1, 2, 1, 2), (1,)),))


def test_gram_sweep_schema():
    cfg = dg.GramProbeConfig(kinds=(st.DENSE,), dims=(64,), trials=10)
    rows = dg.gram_sweep(cfg)
    assert len(rows) == len(cfg.word_pairs)
    assert {"kind", "d_h", "word_i", "word_j", "median_gram",
            "median_abs_dev", "iqr"} <= set(rows[0])


def test_gram_deterministic_and_thread_invariant(monkeypatch):
    cfg = dg.GramProbeConfig(kinds=(st.SPARSE,), dims=(64,), trials=16)
    monkeypatch.setenv("SLICE_THREADS", "1")
    a = dg.gram_stats(st.SPARSE, 64, cfg)
    monkeypatch.setenv("SLICE_THREADS", "4")
    b = dg.gram_stats(st.SPARSE, 64, cfg)
    assert a == b


def test_order_probe_slopes_in_band():
    res = dg.logode_order_probe(dg.OrderProbeConfig())
    assert 0.7 <= res["slopes"][1] <= 1.3
    assert 1.7 <= res["slopes"][2] <= 2.3


def test_order_probe_halving_gain():
    res = dg.logode_order_probe(dg.OrderProbeConfig())
    errs = [r["error"] for r in res["rows"] if r["depth"] == 2]
    # widths are halved between consecutive entries
    assert all(errs[i] / errs[i + 1] >= 3.4 for i in range(len(errs) - 1))


def test_diagonal_depth_invariance_exact():
    assert dg.diagonal_depth_invariance(dg.OrderProbeConfig()) <= 1e-12


def test_scan_equivalence_probe_small():
    rows = dg.scan_equivalence_probe(seeds=3, n_max=64, d_h=16)
    for row in rows:
        assert row["max_rel_error"] <= 1e-10, row


def test_profile_probe_closure():
    rows = {r["kind"]: r for r in dg.profile_probe()}
    assert rows[st.DIAGONAL]["dense_materializations"] == 0
    assert rows[st.BLOCK_DIAGONAL]["dense_materializations"] == 0
    for name in (st.DENSE, st.DPLR, st.SPARSE, st.WALSH_HADAMARD):
        assert rows[name]["dense_materializations"] >= 1
    assert rows[st.DIAGONAL]["combine_rounds"] == int(np.ceil(np.log2(64)))
