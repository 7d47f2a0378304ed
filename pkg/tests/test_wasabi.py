from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixscan.chain import Transaction, TxInput, TxOutput
from mixscan.entities import cluster_entities
from mixscan.wasabi import (
    FEATURE_NAMES,
    WcdhConfig,
    decimal_places,
    detect_wasabi_static,
    detect_wasabi_wcdh,
    extract_features,
    feature_matrix,
    load_coordinator_addresses,
    wcdh_clauses,
)

from conftest import txid

CFG = WcdhConfig()


def tx_of(values, n_inputs, addresses=None):
    outs = tuple(
        TxOutput(v, addresses[i] if addresses else f"o{i}") for i, v in enumerate(values)
    )
    ins = tuple(TxInput(txid(f"in{i}"), 0) for i in range(n_inputs))
    return Transaction(txid(repr((values, n_inputs))), 1, 0, ins, outs)


def oracle_wcdh(values, n_inputs, cfg=CFG):
    """Direct reading of the four clauses, by counting with plain loops."""
    mult = {}
    for v in values:
        mult[v] = mult.get(v, 0) + 1
    m = max(mult.values())
    modes = [v for v in mult if mult[v] == m]
    singles = [v for v in mult if mult[v] == 1]
    in_band = [v for v in modes if cfg.mode_center - cfg.mode_tolerance <= v <= cfg.mode_center + cfg.mode_tolerance]
    return m >= cfg.min_equal_outputs and bool(in_band) and len(singles) >= cfg.min_unique_values and n_inputs >= m


def wasabi_like(m=20, d=10_000_000, uniques=(123_456, 654_321), n_inputs=None):
    return list(uniques) + [d] * m, n_inputs if n_inputs is not None else m


def test_positive_example():
    values, n = wasabi_like()
    assert detect_wasabi_wcdh(tx_of(values, n))


@pytest.mark.parametrize("d", [8_000_000, 12_000_000])
def test_band_is_inclusive(d):
    values, n = wasabi_like(d=d)
    assert detect_wasabi_wcdh(tx_of(values, n))


@pytest.mark.parametrize("d", [7_999_999, 12_000_001])
def test_band_edges_exclusive_beyond(d):
    values, n = wasabi_like(d=d)
    assert not detect_wasabi_wcdh(tx_of(values, n))


def test_nine_equal_outputs_rejected():
    values, n = wasabi_like(m=9)
    assert not detect_wasabi_wcdh(tx_of(values, n))
    values, n = wasabi_like(m=10)
    assert detect_wasabi_wcdh(tx_of(values, n))


def test_one_unique_value_rejected():
    values, n = wasabi_like(uniques=(5,))
    assert not detect_wasabi_wcdh(tx_of(values, n))


def test_fewer_inputs_than_mode_rejected():
    values, _ = wasabi_like(m=20)
    assert not detect_wasabi_wcdh(tx_of(values, 19))
    assert detect_wasabi_wcdh(tx_of(values, 20))


def test_tied_modes_any_in_band():
    values = [10_000_000] * 12 + [50_000_000] * 12 + [1, 2]
    assert detect_wasabi_wcdh(tx_of(values, 30))
    values = [30_000_000] * 12 + [50_000_000] * 12 + [1, 2]
    assert not detect_wasabi_wcdh(tx_of(values, 30))


def test_clause_breakdown_isolates_each_violation():
    for clause, (values, n) in {
        "equal_outputs": wasabi_like(m=9),
        "band": wasabi_like(d=13_000_000),
        "unique_values": wasabi_like(uniques=(7,)),
        "inputs": wasabi_like(n_inputs=19),
    }.items():
        got = wcdh_clauses(tx_of(values, n))
        assert [k for k, ok in got.items() if not ok] == [clause]


@settings(max_examples=300, deadline=None)
@given(
    mode_val=st.integers(7_000_000, 13_000_000),
    m=st.integers(1, 30),
    extra=st.lists(st.integers(1, 30_000_000), max_size=12),
    n_inputs=st.integers(1, 40),
)
def test_matches_oracle(mode_val, m, extra, n_inputs):
    values = [mode_val] * m + extra
    assert detect_wasabi_wcdh(tx_of(values, n_inputs)) == oracle_wcdh(values, n_inputs)
    assert all(wcdh_clauses(tx_of(values, n_inputs)).values()) == oracle_wcdh(values, n_inputs)


def test_exhaustive_small_grid():
    cfg = WcdhConfig(min_equal_outputs=3, mode_center=100, mode_tolerance=10, min_unique_values=1)
    for mult, vals in product(range(1, 5), [(90,), (110,), (89,), (111,), (100, 200)]):
        values = [v for v in vals for _ in range(mult)] + [1]
        for n in range(1, 6):
            assert detect_wasabi_wcdh(tx_of(values, n), cfg) == oracle_wcdh(values, n, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        WcdhConfig(min_equal_outputs=0)
    with pytest.raises(ValueError):
        WcdhConfig(mode_tolerance=20_000_000)


def test_static_heuristic():
    coord = {"coord"}
    values = [10_000_000] * 3 + [777]
    addrs = ["a", "b", "c", "coord"]
    assert detect_wasabi_static(tx_of(values, 3, addrs), coord)
    assert not detect_wasabi_static(tx_of(values, 3, ["a", "b", "c", "d"]), coord)
    values = [10_000_000] * 2 + [5, 777]
    assert not detect_wasabi_static(tx_of(values, 3, addrs), coord)


def test_coordinator_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\naddr1\n\n addr2 \n")
    assert load_coordinator_addresses(p) == {"addr1", "addr2"}


@pytest.mark.parametrize(
    "sats,places",
    [(100_000_000, 0), (10_000_000, 1), (12_000_000, 2), (1, 8), (123_456_789, 8), (250_000_000, 1), (0, 0)],
)
def test_decimal_places(sats, places):
    assert decimal_places(sats) == places


@given(st.integers(0, 10**15))
def test_decimal_places_matches_string_form(sats):
    text = f"{sats // 100_000_000}.{sats % 100_000_000:08d}".rstrip("0").rstrip(".")
    expected = len(text.split(".")[1]) if "." in text else 0
    assert decimal_places(sats) == expected


def test_features_by_hand(chain):
    chain.add("f1", outputs=[(60_000_000, "x", "p2wpkh"), (1_000, "y", "p2pkh")])
    chain.add("f2", outputs=[(30_000_000, "z", "p2wpkh")])
    chain.add(
        "t",
        inputs=[("f1", 0), ("f2", 0)],
        outputs=[(40_000_000, "x"), (40_000_000, "w"), (9_990_000, "v")],
    )
    store = chain.store()
    ent = cluster_entities(store)
    fv = extract_features(store.by_txid[txid("t")], store, ent)
    assert fv.num_uniq_output_val == 2
    assert fv.ratio_num_input_num_output == pytest.approx(2 / 3)
    assert fv.min_output_val == 9_990_000
    assert fv.rng_output_val == 30_010_000
    assert fv.mean_dec_places == pytest.approx((1 + 1 + 4) / 3)  # 0.4, 0.4, 0.0999
    assert fv.num_input_reuse == 1  # x is spent from and paid to
    # x and z are co-spent in t, so x's entity has two addresses
    assert fv.mean_output_cluster_size == pytest.approx((2 + 1 + 1) / 3)
    assert fv.is_native_segwit
    assert len(fv.as_array()) == len(FEATURE_NAMES)


def test_segwit_flag_needs_every_script(chain):
    chain.add("f", outputs=[(5_000, "a", "p2pkh")])
    chain.add("t", inputs=[("f", 0)], outputs=[(4_000, "b")])
    store = chain.store()
    fv = extract_features(store.by_txid[txid("t")], store, cluster_entities(store))
    assert not fv.is_native_segwit
    # the first tx spends from outside the feed
    fv0 = extract_features(store.by_txid[txid("f")], store, cluster_entities(store))
    assert not fv0.is_native_segwit and fv0.num_input_reuse == 0


def test_feature_matrix_shape(small_corpus):
    corpus, store, ds = small_corpus
    txs = list(store)[:40]
    X = feature_matrix(txs, store, cluster_entities(store, ds.coinjoin_txids()))
    assert X.shape == (40, 8) and np.isfinite(X).all()
    assert feature_matrix([], store, cluster_entities(store)).shape == (0, 8)


def test_synthetic_positives_and_near_misses(small_corpus):
    corpus, store, ds = small_corpus
    for tx in store:
        label, _ = corpus.labels[tx.txid]
        assert detect_wasabi_wcdh(tx) == (label == "wasabi")
    for t, clause in corpus.truth["wasabi_near_miss"].items():
        failed = [k for k, ok in wcdh_clauses(store.by_txid[t]).items() if not ok]
        assert failed == [clause]
