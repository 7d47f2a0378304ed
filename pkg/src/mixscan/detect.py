"""Detection results across protocols and their CSV round-trip."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .chain import ChainStore
from .whirlpool import MixRecord, Pool, WhirlpoolSet, detect_whirlpool, identify_tx0, scan_whirlpool
from .wasabi import WcdhConfig, detect_wasabi_static, detect_wasabi_wcdh

logger = logging.getLogger(__name__)

WASABI = "wasabi"
SAMOURAI = "samourai"

WASABI_HEADER = ["txid", "height", "static", "wcdh", "forest"]
SAMOURAI_HEADER = ["txid", "pool", "height", "remix_input_count"]
TX0_HEADER = ["txid", "height"]


@dataclass
class DetectionSet:
    wasabi_static: set[str] = field(default_factory=set)
    wasabi_wcdh: set[str] = field(default_factory=set)
    whirlpool: WhirlpoolSet = field(default_factory=WhirlpoolSet)
    tx0: set[str] = field(default_factory=set)
    wasabi_forest: set[str] | None = None

    @property
    def wasabi(self) -> set[str]:
        """Wasabi CoinJoins used downstream: static or WCDH hits (the forest is opt-in)."""
        return self.wasabi_static | self.wasabi_wcdh

    def samourai(self) -> set[str]:
        return self.whirlpool.txids()

    def coinjoin_txids(self) -> set[str]:
        return self.wasabi | self.samourai()

    def protocol_of(self, txid: str) -> str | None:
        if txid in self.wasabi_static or txid in self.wasabi_wcdh:
            return WASABI
        if txid in self.whirlpool:
            return SAMOURAI
        return None

    def counts(self) -> dict:
        return {
            "wasabi": len(self.wasabi),
            "wasabi_static": len(self.wasabi_static),
            "wasabi_wcdh": len(self.wasabi_wcdh),
            "wasabi_forest": None if self.wasabi_forest is None else len(self.wasabi_forest),
            "samourai": len(self.whirlpool),
            "samourai_by_pool": {str(d): len(m) for d, m in sorted(self.whirlpool.pools.items())},
            "tx0": len(self.tx0),
        }


def detect_wasabi(
    store: ChainStore,
    coordinators: Iterable[str] = (),
    wcdh: WcdhConfig = WcdhConfig(),
) -> tuple[set[str], set[str]]:
    coordinators = frozenset(coordinators)
    static, thresh = set(), set()
    for tx in store:
        if coordinators and detect_wasabi_static(tx, coordinators):
            static.add(tx.txid)
        if detect_wasabi_wcdh(tx, wcdh):
            thresh.add(tx.txid)
    return static, thresh


def detect_all(
    store: ChainStore,
    coordinators: Iterable[str] = (),
    wcdh: WcdhConfig = WcdhConfig(),
    pools: Iterable[Pool] | None = None,
    genesis: Mapping[int, Iterable[str]] | None = None,
) -> DetectionSet:
    static, thresh = detect_wasabi(store, coordinators, wcdh)
    if genesis is not None:
        wp = scan_whirlpool(store, genesis, pools)
    else:
        wp = detect_whirlpool(store, pools)
    return DetectionSet(static, thresh, wp, identify_tx0(store, wp))


def rebuild_whirlpool(store: ChainStore, pool_of: Mapping[str, int]) -> WhirlpoolSet:
    """Recreate parent links for a known txid -> pool map."""
    wp = WhirlpoolSet(pools={d: {} for d in sorted(set(pool_of.values()))})
    for tx in store:
        denom = pool_of.get(tx.txid)
        if denom is None:
            continue
        members = wp.pools[denom]
        remix = tuple(i for i, txin in enumerate(tx.inputs) if txin.prev_txid in members)
        members[tx.txid] = MixRecord(
            tx.txid, denom, tx.height, remix, frozenset(tx.inputs[i].prev_txid for i in remix)
        )
    wp.genesis = {
        d: frozenset(t for t, r in m.items() if not r.remix_inputs) for d, m in wp.pools.items()
    }
    return wp


def _flag(value: bool | None) -> str:
    return "" if value is None else str(int(value))


def write_detections(ds: DetectionSet, store: ChainStore, outdir: str | Path) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    wasabi_ids = ds.wasabi | (ds.wasabi_forest or set())
    with open(outdir / "wasabi.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WASABI_HEADER)
        for tx in store:
            if tx.txid in wasabi_ids:
                forest = None if ds.wasabi_forest is None else tx.txid in ds.wasabi_forest
                w.writerow([
                    tx.txid, tx.height, _flag(tx.txid in ds.wasabi_static),
                    _flag(tx.txid in ds.wasabi_wcdh), _flag(forest),
                ])
    with open(outdir / "samourai.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMOURAI_HEADER)
        for tx in store:
            denom = ds.whirlpool.pool_of(tx.txid)
            if denom is not None:
                rec = ds.whirlpool.pools[denom][tx.txid]
                w.writerow([tx.txid, denom, tx.height, rec.remix_input_count])
    with open(outdir / "tx0.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TX0_HEADER)
        for tx in store:
            if tx.txid in ds.tx0:
                w.writerow([tx.txid, tx.height])


def _read_rows(path: Path, header: list[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise ValueError(f"{path}: expected header {','.join(header)}")
        return list(reader)


def read_detections(store: ChainStore, indir: str | Path) -> DetectionSet:
    indir = Path(indir)
    static, thresh, forest = set(), set(), None
    for row in _read_rows(indir / "wasabi.csv", WASABI_HEADER):
        if row["static"] == "1":
            static.add(row["txid"])
        if row["wcdh"] == "1":
            thresh.add(row["txid"])
        if row["forest"] != "":
            forest = forest if forest is not None else set()
            if row["forest"] == "1":
                forest.add(row["txid"])
    pool_of = {
        row["txid"]: int(row["pool"]) for row in _read_rows(indir / "samourai.csv", SAMOURAI_HEADER)
    }
    missing = [t for t in list(static | thresh) + list(pool_of) if t not in store]
    if missing:
        raise ValueError(f"{len(missing)} detected txids are not in the feed, e.g. {missing[0]}")
    tx0 = {row["txid"] for row in _read_rows(indir / "tx0.csv", TX0_HEADER)}
    return DetectionSet(static, thresh, rebuild_whirlpool(store, pool_of), tx0, forest)
