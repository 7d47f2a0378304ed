"""Batch command-line frontend: ingest, detect, cluster, classify and report.

Exit codes: 0 success, 1 configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ChainStore, FeedError, load_chain_store
from .detect import DetectionSet, detect_all, read_detections, rebuild_whirlpool, write_detections
from .entities import (
    Direction,
    assign_levels,
    attribute_entities,
    cluster_entities,
    compute_degrees,
    exchange_entities,
    load_tags,
)
from .forest import (
    Forest,
    LabeledCorpus,
    TrainConfig,
    confusion,
    oob_error,
    split_train_test,
    train_forest,
)
from .metrics import RateGap, RateTable, write_reports
from .synth import ScenarioPlan, generate, read_labels
from .wasabi import FEATURE_NAMES, WcdhConfig, detect_wasabi_wcdh, feature_matrix, load_coordinator_addresses
from .whirlpool import DEFAULT_PREMIX_TOLERANCE, POOL_DENOMINATIONS, Pool, load_genesis_overrides

logger = logging.getLogger("mixscan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _need_file(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return p


def _load_config(fn, path: Path | None, what: str):
    if path is None:
        return None
    try:
        return fn(path)
    except (ValueError, KeyError, TypeError, OSError, ArithmeticError) as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc


def _load_store(path: str) -> ChainStore:
    try:
        return load_chain_store(path)
    except FeedError as exc:
        raise DataError(f"{path}: {exc}") from exc
    except (OSError, EOFError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _wcdh_config(args) -> WcdhConfig:
    try:
        return WcdhConfig(args.min_equal, args.mode_center, args.mode_tolerance, args.min_unique)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _pools(args) -> list[Pool]:
    try:
        return [Pool(d, args.premix_tolerance) for d in POOL_DENOMINATIONS]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _genesis_overrides(pairs: list[str]) -> dict[int, set[str]] | None:
    if not pairs:
        return None
    paths = {}
    for pair in pairs:
        denom, sep, path = pair.partition("=")
        if not sep or not denom.isdigit():
            raise ConfigError(f"--genesis expects POOL=PATH, got {pair!r}")
        paths[int(denom)] = _need_file(path, "genesis file")
    try:
        return load_genesis_overrides(paths)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _check_t(t: int) -> int:
    if t < 1:
        raise ConfigError("--t must be positive")
    return t


# ---------------------------------------------------------------- commands

def cmd_ingest_check(args) -> int:
    store = _load_store(args.feed)
    lo, hi = store.height_range if len(store) else (None, None)
    doc = {
        "transactions": len(store),
        "block_range": [lo, hi],
        "unresolved_inputs": len(store.unresolved),
    }
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    plan_path = _need_file(args.plan, "plan file")
    if plan_path:
        plan = _load_config(lambda p: ScenarioPlan.from_json(p.read_text(encoding="utf-8")), plan_path, "plan")
    else:
        plan = ScenarioPlan()
    if args.seed is not None:
        plan.seed = args.seed
    corpus = generate(plan)
    paths = corpus.write(args.out, gzip_feed=args.gzip)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    return EXIT_OK


def _entities_for(store: ChainStore, ds: DetectionSet, prefilter: bool):
    return compute_degrees(store, cluster_entities(store, ds.coinjoin_txids(), prefilter=prefilter))


def cmd_detect(args) -> int:
    wcdh = _wcdh_config(args)
    pools = _pools(args)
    coordinators = _load_config(load_coordinator_addresses, _need_file(args.coordinators, "coordinator file"), "coordinator file")
    genesis = _genesis_overrides(args.genesis)
    model = _load_config(Forest.load, _need_file(args.model, "model file"), "model")

    store = _load_store(args.feed)
    ds = detect_all(store, coordinators or (), wcdh, pools, genesis)
    if genesis is not None:
        missing = [t for txids in genesis.values() for t in txids if t not in store]
        if missing:
            raise DataError(f"genesis txid not in feed: {missing[0]}")
    if model is not None:
        entities = _entities_for(store, ds, args.prefilter)
        txs = list(store)
        pred = model.predict(feature_matrix(txs, store, entities)) if txs else []
        ds.wasabi_forest = {tx.txid for tx, p in zip(txs, pred) if p}

    out = Path(args.out)
    write_detections(ds, store, out)
    lo, hi = store.height_range if len(store) else (None, None)
    _write_json(out / "summary.json", {
        "counts": ds.counts(),
        "block_range": [lo, hi],
        "config": {
            "feed": str(args.feed),
            "wcdh": {
                "min_equal_outputs": wcdh.min_equal_outputs,
                "mode_center": wcdh.mode_center,
                "mode_tolerance": wcdh.mode_tolerance,
                "min_unique_values": wcdh.min_unique_values,
            },
            "premix_tolerance": args.premix_tolerance,
            "coordinators": args.coordinators,
            "genesis": sorted(args.genesis),
            "model": args.model,
        },
    })
    return EXIT_OK


def _truth_and_detections(args, store: ChainStore) -> tuple[dict[str, int], DetectionSet]:
    """Class labels per txid plus the CoinJoin set used to exclude txs from clustering."""
    if args.labels:
        labels = {t: v for t, v in read_labels(args.labels).items() if t in store}
        wasabi = {t for t, (lab, _) in labels.items() if lab == "wasabi"}
        pool_of = {t: pool for t, (lab, pool) in labels.items() if lab == "whirlpool"}
        ds = DetectionSet(wasabi_wcdh=wasabi, whirlpool=rebuild_whirlpool(store, pool_of))
        return {t: int(t in wasabi) for t in labels}, ds
    ds = read_detections(store, args.detections)
    return {tx.txid: int(tx.txid in ds.wasabi) for tx in store}, ds


def cmd_features(args) -> int:
    _need_file(args.labels, "labels file")
    store = _load_store(args.feed)
    try:
        truth, ds = _truth_and_detections(args, store)
    except (ValueError, KeyError, TypeError, OSError) as exc:
        raise DataError(str(exc)) from exc
    entities = _entities_for(store, ds, args.prefilter)

    ids = [tx.txid for tx in store if tx.txid in truth]
    if args.balanced:
        pos = [t for t in ids if truth[t]]
        neg = [t for t in ids if not truth[t]]
        k = min(len(pos), len(neg))
        rng = random.Random(args.seed)
        keep = set(rng.sample(pos, k)) | set(rng.sample(neg, k))
        ids = [t for t in ids if t in keep]
    X = feature_matrix([store.by_txid[t] for t in ids], store, entities) if ids else np.zeros((0, 8))
    write_feature_csv(args.out, ids, X, [truth[t] for t in ids])
    return EXIT_OK


def write_feature_csv(path: str | Path, ids, X, y) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["txid", *FEATURE_NAMES, "label"])
        for txid, row, label in zip(ids, X, y):
            w.writerow([txid, *(repr(float(v)) for v in row), int(label)])


def read_feature_csv(path: str | Path) -> LabeledCorpus:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["txid", *FEATURE_NAMES, "label"]:
            raise ValueError(f"{path}: unexpected feature header")
        ids, rows, y = [], [], []
        for rec in reader:
            ids.append(rec[0])
            rows.append([float(v) for v in rec[1:-1]])
            y.append(int(rec[-1]))
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(FEATURE_NAMES))
    return LabeledCorpus(ids, X, np.asarray(y, dtype=np.int64))


def _train_config(args) -> TrainConfig:
    try:
        return TrainConfig(args.trees, args.mtry, args.seed, args.max_depth, args.min_leaf)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _read_corpus(path: str) -> LabeledCorpus:
    _need_file(path, "features file")
    try:
        return read_feature_csv(path)
    except (ValueError, IndexError) as exc:
        raise DataError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _train_config(args)
    corpus = _read_corpus(args.features)
    try:
        forest = train_forest(corpus, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    forest.save(args.out)
    print(json.dumps({"n_train": len(corpus.y), "oob_error": oob_error(forest, corpus)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _train_config(args)
    if not 0 < args.train_fraction < 1:
        raise ConfigError("--train-fraction must be in (0, 1)")
    wcdh = _wcdh_config(args)
    corpus = _read_corpus(args.features)
    store = _load_store(args.feed)
    train, test = split_train_test(corpus, args.train_fraction, args.seed)
    try:
        forest = train_forest(train, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if len(test.y) == 0:
        raise DataError("test split is empty")
    missing = [t for t in test.ids if t not in store]
    if missing:
        raise DataError(f"feature txid not in feed: {missing[0]}")
    wcdh_pred = [int(detect_wasabi_wcdh(store.by_txid[t], wcdh)) for t in test.ids]
    rows = [
        confusion(test.y, wcdh_pred).csv_row("wcdh"),
        confusion(test.y, forest.predict(test.X)).csv_row("forest"),
    ]
    Path(args.out).write_text("method,accuracy,fpr,fnr\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return EXIT_OK


def cmd_cluster(args) -> int:
    t = _check_t(args.t)
    tags_path = _need_file(args.tags, "tag file")
    tags = _load_config(load_tags, tags_path, "tag file") or []
    store = _load_store(args.feed)
    try:
        ds = read_detections(store, args.detections)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(str(exc)) from exc
    entities = _entities_for(store, ds, args.prefilter)
    attribution = attribute_entities(entities, tags)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "entities.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "entity"])
        for addr in sorted(entities.entity):
            w.writerow([addr, entities.entity[addr]])
    with open(out / "levels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity", "level", "direction", "category"])
        for direction in (Direction.SEND, Direction.RECEIVE):
            levels = assign_levels(store, entities, ds.coinjoin_txids(), t, direction)
            for ent, lv in sorted(levels.levels.items(), key=lambda kv: (kv[1], kv[0])):
                tag = attribution.get(ent)
                w.writerow([ent, lv, direction.value, tag.category if tag else ""])
    return EXIT_OK


def cmd_report(args) -> int:
    t = _check_t(args.t)
    tags = _load_config(load_tags, _need_file(args.tags, "tag file"), "tag file") or []
    rates = _load_config(RateTable.from_csv, _need_file(args.rates, "rates file"), "rates file")
    store = _load_store(args.feed)
    try:
        ds = read_detections(store, args.detections)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(str(exc)) from exc
    entities = _entities_for(store, ds, args.prefilter)
    exchanges = exchange_entities(attribute_entities(entities, tags))
    try:
        counts = write_reports(args.out, store, ds, entities, exchanges, t, rates)
    except RateGap as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_wcdh(p: argparse.ArgumentParser) -> None:
    d = WcdhConfig()
    p.add_argument("--min-equal", type=int, default=d.min_equal_outputs, help="minimum mode multiplicity")
    p.add_argument("--mode-center", type=int, default=d.mode_center, help="target mode value (sat)")
    p.add_argument("--mode-tolerance", type=int, default=d.mode_tolerance, help="allowed mode deviation (sat)")
    p.add_argument("--min-unique", type=int, default=d.min_unique_values, help="minimum singleton output values")


def _add_train(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--trees", type=int, default=d.n_trees)
    p.add_argument("--mtry", type=int, default=d.mtry)
    p.add_argument("--seed", type=int, default=d.rng_seed)
    p.add_argument("--max-depth", type=int, default=d.max_depth)
    p.add_argument("--min-leaf", type=int, default=d.min_leaf)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixscan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest-check", help="validate a feed and print basic statistics")
    p.add_argument("--feed", required=True)
    p.set_defaults(func=cmd_ingest_check)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--plan", help="scenario plan JSON (defaults otherwise)")
    p.add_argument("--seed", type=int)
    p.add_argument("--gzip", action="store_true", help="write feed.ndjson.gz")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="run Wasabi heuristics and the Whirlpool scanner")
    p.add_argument("--feed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--coordinators", help="coordinator addresses, one per line")
    p.add_argument("--genesis", action="append", default=[], metavar="POOL=PATH",
                   help="genesis txids for a pool (repeatable); disables genesis search")
    p.add_argument("--premix-tolerance", type=int, default=DEFAULT_PREMIX_TOLERANCE)
    p.add_argument("--model", help="forest model JSON; adds a forest column")
    p.add_argument("--prefilter", action="store_true", help="also exclude likely CoinJoins from clustering")
    _add_wcdh(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("features", help="write the feature matrix for labeled transactions")
    p.add_argument("--feed", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--labels", help="labels.csv from synth")
    src.add_argument("--detections", help="detection directory (heuristic labels)")
    p.add_argument("--balanced", action="store_true", help="subsample to equal class sizes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefilter", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a random forest on a feature CSV")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    _add_train(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="train/test split comparing WCDH and the forest")
    p.add_argument("--features", required=True)
    p.add_argument("--feed", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, default=0.7)
    _add_train(p)
    _add_wcdh(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", help="cluster addresses and assign levels")
    p.add_argument("--feed", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tags")
    p.add_argument("--t", type=int, default=100, help="degree threshold")
    p.add_argument("--prefilter", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("report", help="write all metric CSVs")
    p.add_argument("--feed", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tags")
    p.add_argument("--rates", help="daily BTC/USD closing rates (date,rate)")
    p.add_argument("--t", type=int, default=100)
    p.add_argument("--prefilter", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
