"""Acceptance criteria, one test each. Every test prints a PASS/FAIL line."""
import random
import time

import numpy as np
import pytest

from mixscan.chain import build_chain_store
from mixscan.cli import main
from mixscan.detect import DetectionSet, detect_all
from mixscan.entities import Direction, cluster_entities, traverse_levels
from mixscan.forest import LabeledCorpus, TrainConfig, evaluate, oob_error, split_train_test, train_forest
from mixscan.metrics import (
    HEADERS,
    Status,
    anonymity_bounds,
    anonymity_upper_bound,
    conservation_check,
    mixed_and_fresh_flows,
    pre_post_anonymity,
)
from mixscan.synth import ScenarioPlan, collector_scenario, generate, star_scenario
from mixscan.wasabi import detect_wasabi_wcdh, feature_matrix, wcdh_clauses
from mixscan.whirlpool import POOL_DENOMINATIONS, scan_whirlpool

from test_entities import brute_levels, closure_oracle, random_clustering_instance, random_graph
from test_whirlpool import lfp_oracle, random_instance
from conftest import Chain, txid


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail="", elapsed=None):
        timing = f" [{elapsed:.2f}s]" if elapsed is not None else ""
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}{timing}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def wasabi_corpus():
    plan = ScenarioPlan(
        seed=2024, n_wasabi=5_000, wasabi_outputs=(10, 40), wasabi_near_miss=1_000,
        wasabi_standalone=5, n_background=4_000, whirlpool_mixes={}, whirlpool_genesis={},
        span_days=365,
    )
    corpus = generate(plan)
    return corpus, build_chain_store(corpus.transactions)


def test_wcdh_boundary_suite(wasabi_corpus, verdict):
    corpus, store = wasabi_corpus
    t0 = time.perf_counter()
    flagged = {tx.txid for tx in store if detect_wasabi_wcdh(tx)}
    elapsed = time.perf_counter() - t0
    pos = corpus.txids_with("wasabi")
    neg = {tx.txid for tx in store} - pos
    near = corpus.truth["wasabi_near_miss"]
    single_clause = all(
        [k for k, ok in wcdh_clauses(store.by_txid[t]).items() if not ok] == [clause]
        for t, clause in near.items()
    )
    fp, fn = len(flagged & neg), len(pos - flagged)
    n_bg = len(corpus.txids_with("background")) - len(near)
    ok = (len(pos) == 5_000 and len(near) + n_bg >= 5_000 and fp == 0 and fn == 0
          and single_clause and not (flagged & set(near)) and elapsed < 30)
    verdict("WCDH boundary suite", ok,
            f"positives={len(pos)} negatives={len(neg)} near_miss={len(near)} FPR={fp / len(neg):.4f} "
            f"FNR={fn / len(pos):.4f} single_clause={single_clause}", elapsed)


def test_classifier_suite(wasabi_corpus, verdict):
    corpus, store = wasabi_corpus
    t0 = time.perf_counter()
    pos = sorted(corpus.txids_with("wasabi"))
    neg = sorted({tx.txid for tx in store} - set(pos))
    rng = random.Random(0)
    ids = pos + rng.sample(neg, len(pos))
    entities = cluster_entities(store, set(pos))
    X = feature_matrix([store.by_txid[t] for t in ids], store, entities)
    data = LabeledCorpus(ids, X, np.array([1] * len(pos) + [0] * len(pos)))
    train, test = split_train_test(data, 0.7, seed=0)
    cfg = TrainConfig(n_trees=500, rng_seed=0)

    runs = []
    for _ in range(2):
        forest = train_forest(train, cfg)
        m = evaluate(forest, test)
        runs.append((m.accuracy, m.fpr, m.fnr, oob_error(forest, train)))
    elapsed = time.perf_counter() - t0
    acc, _, _, oob = runs[0]
    ok = len(ids) == 10_000 and acc >= 0.99 and oob <= 0.01 and runs[0] == runs[1] and elapsed < 300
    verdict("Classifier suite", ok,
            f"n={len(ids)} trees=500 accuracy={acc:.4%} oob={oob:.4%} deterministic={runs[0] == runs[1]}", elapsed)


def test_whirlpool_scanner(verdict):
    plan = ScenarioPlan(
        seed=77, n_wasabi=0, n_background=200,
        whirlpool_mixes={d: 260 for d in POOL_DENOMINATIONS},
        whirlpool_genesis={100_000: 3, 1_000_000: 3, 5_000_000: 1, 50_000_000: 1},
        whirlpool_decoys=20, whirlpool_near_miss=30, span_days=200,
    )
    corpus = generate(plan)
    store = build_chain_store(corpus.transactions)
    t0 = time.perf_counter()
    ds = detect_all(store)
    elapsed = time.perf_counter() - t0
    truth = corpus.txids_with("whirlpool")
    found = ds.whirlpool.txids()
    precision = len(found & truth) / len(found)
    recall = len(found & truth) / len(truth)
    per_pool = all(ds.whirlpool.txids(d) == corpus.txids_with("whirlpool", d) for d in POOL_DENOMINATIONS)
    genesis_ok = all(len(ds.whirlpool.genesis[d]) == plan.whirlpool_genesis[d] for d in POOL_DENOMINATIONS)

    lfp_ok = True
    for seed in range(5):
        txs = random_instance(seed, n=100)
        small = build_chain_store(txs)
        shaped = [t.txid for t in txs if len(t.inputs) == 5 and len(t.outputs) == 5
                  and all(o.value == 1_000_000 for o in t.outputs)]
        genesis = set(random.Random(seed).sample(shaped, 2))
        lfp_ok &= scan_whirlpool(small, {1_000_000: genesis}).txids(1_000_000) == lfp_oracle(txs, genesis, 1_000_000)
    ok = len(truth) >= 1_000 and precision == recall == 1.0 and per_pool and genesis_ok and lfp_ok and elapsed < 10
    verdict("Whirlpool scanner", ok,
            f"mixes={len(truth)} precision={precision:.3f} recall={recall:.3f} genesis_ok={genesis_ok} lfp_100tx={lfp_ok}",
            elapsed)


def test_entity_clustering(verdict):
    t0 = time.perf_counter()
    equal = shuffled = 0
    for seed in range(20):
        funding, spenders, excluded = random_clustering_instance(seed, 500)
        expected = closure_oracle(funding + spenders, excluded)
        got = cluster_entities(build_chain_store(funding + spenders), excluded).entity
        equal += got == expected
        rng = random.Random(1_000 + seed)
        for _ in range(5):
            order = spenders[:]
            rng.shuffle(order)
            shuffled += cluster_entities(build_chain_store(funding + order), excluded).entity == got
    verdict("Entity clustering", equal == 20 and shuffled == 100,
            f"oracle_equal={equal}/20 shuffle_stable={shuffled}/100", time.perf_counter() - t0)


def test_level_traversal(verdict):
    t0 = time.perf_counter()
    match = total = 0
    monotone = True
    for seed in range(10):
        g, seeds = random_graph(seed, 200)
        for direction in Direction:
            prev = None
            for t in (50, 75, 100):
                got = traverse_levels(g, seeds, t, direction)
                total += 1
                match += got == brute_levels(g, seeds, t, direction)
                if prev is not None:
                    monotone &= set(prev) <= set(got) and all(got[e] <= lv for e, lv in prev.items())
                prev = got
    verdict("Level traversal", match == total and monotone,
            f"oracle_match={match}/{total} monotone={monotone}", time.perf_counter() - t0)


def _corpora():
    base = dict(
        n_wasabi=40, wasabi_outputs=(10, 30), wasabi_near_miss=8, n_background=80,
        whirlpool_mixes={d: 15 for d in POOL_DENOMINATIONS}, whirlpool_decoys=4, whirlpool_near_miss=6,
        exchange_plants={"wasabi": (2, 2), "whirlpool": (2, 1)}, span_days=150,
    )
    plans = [ScenarioPlan(seed=s, exits_per_event=e, **base) for s, e in ((1, 0.5), (2, 2.0), (3, 4.0), (4, 0.0))]
    plans += [star_scenario(20), collector_scenario(20)]
    for plan in plans:
        corpus = generate(plan)
        store = build_chain_store(corpus.transactions)
        yield corpus, store, detect_all(store, plan.coordinator_addresses)


@pytest.fixture(scope="module")
def corpora():
    return list(_corpora())


def test_flow_ledger_conservation(corpora, wasabi_corpus, verdict):
    t0 = time.perf_counter()
    corpus, store = wasabi_corpus
    sets = corpora + [(corpus, store, detect_all(store, corpus.plan.coordinator_addresses))]
    outputs = residual_zero = statuses_ok = 0
    for corpus, store, ds in sets:
        led = mixed_and_fresh_flows(store, ds)
        n_out = sum(len(store.by_txid[t].outputs) for t in ds.coinjoin_txids())
        statuses_ok += len(led.outputs) == n_out and all(isinstance(o.status, Status) for o in led.outputs.values())
        outputs += n_out
        for proto in ("wasabi", "samourai"):
            residual_zero += conservation_check(led, proto)["residual"] == 0
    ok = statuses_ok == len(sets) and residual_zero == 2 * len(sets)
    verdict("Flow ledger conservation", ok,
            f"corpora={len(sets)} coinjoin_outputs={outputs} one_status={statuses_ok}/{len(sets)} "
            f"identity_exact={residual_zero}/{2 * len(sets)}", time.perf_counter() - t0)


def test_anonymity_bounds(corpora, verdict):
    t0 = time.perf_counter()
    months = negatives = 0
    for corpus, store, ds in corpora:
        for b in anonymity_bounds(mixed_and_fresh_flows(store, ds), ds):
            months += 1
            negatives += b.alpha < 0
    chain = Chain()
    chain.add("fund", outputs=[(50_000_000, "a"), (50_000_000, "b")])
    chain.add("cj", inputs=[("fund", 0), ("fund", 1)], outputs=[(10_000_000, f"o{i}") for i in range(10)])
    spot_store = chain.store()
    (spot,) = anonymity_upper_bound(mixed_and_fresh_flows(spot_store, DetectionSet(wasabi_wcdh={txid("cj")})), 1_000_000)
    ok = negatives == 0 and months > 0 and spot.bound == 100
    verdict("Anonymity bounds", ok,
            f"bound_rows={months} negative_alpha={negatives} spot(1.00 BTC in, 0 out)={spot.bound}",
            time.perf_counter() - t0)


def test_pre_post_anonymity(verdict):
    t0 = time.perf_counter()
    results = {}
    for side, plan in (("pre", star_scenario(20)), ("post", collector_scenario(20))):
        corpus = generate(plan)
        store = build_chain_store(corpus.transactions)
        ds = detect_all(store, plan.coordinator_addresses)
        led = mixed_and_fresh_flows(store, ds)
        rows = pre_post_anonymity(store, ds, led, cluster_entities(store, ds.coinjoin_txids()))
        row = max((r for r in rows if r["protocol"] == "wasabi" and r["side"] == side),
                  key=lambda r: r["address_count"])
        results[side] = (row["address_count"], row["entity_count"])
    ok = results == {"pre": (20, 1), "post": (20, 1)}
    verdict("Pre/post anonymity", ok,
            f"star pre={results['pre'][0]}:{results['pre'][1]} collector post={results['post'][0]}:{results['post'][1]}",
            time.perf_counter() - t0)


def test_end_to_end_determinism(tmp_path, verdict):
    t0 = time.perf_counter()
    plan = tmp_path / "plan.json"
    plan.write_text(ScenarioPlan(
        seed=5, n_wasabi=60, wasabi_outputs=(10, 30), wasabi_near_miss=8, n_background=120,
        whirlpool_mixes={d: 12 for d in POOL_DENOMINATIONS},
        exchange_plants={"wasabi": (2, 1), "whirlpool": (1, 1)}, span_days=120,
    ).to_json())
    codes = []
    for run in ("a", "b"):
        d = tmp_path / run
        c = str(d / "corpus")
        feed = f"{c}/feed.ndjson"
        codes += [
            main(["synth", "--out", c, "--plan", str(plan)]),
            main(["detect", "--feed", feed, "--out", str(d / "det"), "--coordinators", f"{c}/coordinators.txt"]),
            main(["features", "--feed", feed, "--labels", f"{c}/labels.csv", "--out", str(d / "features.csv"), "--balanced"]),
            main(["eval", "--features", str(d / "features.csv"), "--feed", feed, "--out", str(d / "eval.csv"), "--trees", "50"]),
            main(["cluster", "--feed", feed, "--detections", str(d / "det"), "--tags", f"{c}/tags.csv", "--out", str(d / "out")]),
            main(["report", "--feed", feed, "--detections", str(d / "det"), "--tags", f"{c}/tags.csv", "--out", str(d / "out")]),
        ]
    csvs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    same = [(tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in csvs]
    expected = set(HEADERS) | {"entities.csv", "levels.csv", "wasabi.csv", "samourai.csv", "tx0.csv", "eval.csv"}
    ok = all(c == 0 for c in codes) and all(same) and expected <= {p.name for p in csvs}
    verdict("End-to-end determinism", ok, f"csv_files={len(csvs)} identical={sum(same)}/{len(csvs)}",
            time.perf_counter() - t0)
