"""Samourai Whirlpool detection.

Mixes are found by a single chronological pass seeded with each pool's
genesis mixes: a transaction joins a pool when it has the fixed 5-in/5-out
shape with every output equal to the pool denomination and spends at least
one output of a mix already in that pool.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .chain import ChainStore, Transaction

POOL_DENOMINATIONS = (100_000, 1_000_000, 5_000_000, 50_000_000)
DEFAULT_PREMIX_TOLERANCE = 110_000
MIX_SIZE = 5


@dataclass(frozen=True)
class Pool:
    denomination: int
    premix_tolerance: int = DEFAULT_PREMIX_TOLERANCE

    def __post_init__(self):
        if self.denomination not in POOL_DENOMINATIONS:
            raise ValueError(f"unknown pool denomination {self.denomination}")
        if self.premix_tolerance < 0:
            raise ValueError("premix_tolerance must be non-negative")

    def is_premix_value(self, value: int) -> bool:
        return self.denomination <= value <= self.denomination + self.premix_tolerance


def default_pools(premix_tolerance: int = DEFAULT_PREMIX_TOLERANCE) -> list[Pool]:
    return [Pool(d, premix_tolerance) for d in POOL_DENOMINATIONS]


def is_whirlpool_shape(tx: Transaction, pool: Pool) -> bool:
    return (
        len(tx.inputs) == MIX_SIZE
        and len(tx.outputs) == MIX_SIZE
        and all(o.value == pool.denomination for o in tx.outputs)
    )


def is_genesis_candidate(tx: Transaction, store: ChainStore, pool: Pool) -> bool:
    """Shape match, every input premix-sized, and no input taken from a mix-shaped tx."""
    if not is_whirlpool_shape(tx, pool):
        return False
    for txin in tx.inputs:
        if not store.has_output(txin.prev_txid, txin.prev_vout):
            return False
        if not pool.is_premix_value(store.resolve(txin).value):
            return False
        if is_whirlpool_shape(store.by_txid[txin.prev_txid], pool):
            return False
    return True


def find_genesis_mixes(store: ChainStore, pool: Pool) -> set[str]:
    return {tx.txid for tx in store if is_genesis_candidate(tx, store, pool)}


@dataclass(frozen=True)
class MixRecord:
    txid: str
    pool: int
    height: int
    remix_inputs: tuple[int, ...]
    parents: frozenset[str]

    @property
    def remix_input_count(self) -> int:
        return len(self.remix_inputs)


@dataclass
class WhirlpoolSet:
    pools: dict[int, dict[str, MixRecord]] = field(default_factory=dict)
    genesis: dict[int, frozenset[str]] = field(default_factory=dict)

    def __contains__(self, txid: str) -> bool:
        return any(txid in mixes for mixes in self.pools.values())

    def __len__(self) -> int:
        return sum(len(m) for m in self.pools.values())

    def pool_of(self, txid: str) -> int | None:
        for denom, mixes in self.pools.items():
            if txid in mixes:
                return denom
        return None

    def txids(self, pool: int | None = None) -> set[str]:
        if pool is not None:
            return set(self.pools.get(pool, {}))
        return {t for mixes in self.pools.values() for t in mixes}

    def records(self) -> list[MixRecord]:
        recs = [r for mixes in self.pools.values() for r in mixes.values()]
        recs.sort(key=lambda r: (r.height, r.pool, r.txid))
        return recs


def scan_whirlpool(
    store: ChainStore,
    genesis: Mapping[int, Iterable[str]],
    pools: Iterable[Pool] | None = None,
) -> WhirlpoolSet:
    genesis = {denom: frozenset(txids) for denom, txids in genesis.items()}
    pools = {p.denomination: p for p in (pools or default_pools())}
    active = [pools[d] if d in pools else Pool(d) for d in sorted(genesis)]
    result = WhirlpoolSet(pools={p.denomination: {} for p in active}, genesis=genesis)

    for tx in store:
        for pool in active:
            members = result.pools[pool.denomination]
            seeds = genesis[pool.denomination]
            is_seed = tx.txid in seeds
            if not is_seed and not is_whirlpool_shape(tx, pool):
                continue
            remix = tuple(
                idx for idx, txin in enumerate(tx.inputs)
                if txin.prev_txid in members
            )
            if not remix and not is_seed:
                continue
            result.pools[pool.denomination][tx.txid] = MixRecord(
                tx.txid,
                pool.denomination,
                tx.height,
                remix,
                frozenset(tx.inputs[i].prev_txid for i in remix),
            )
            break
    return result


def detect_whirlpool(store: ChainStore, pools: Iterable[Pool] | None = None) -> WhirlpoolSet:
    """Find genesis mixes per pool, then scan. Pools without a genesis are skipped."""
    pools = list(pools or default_pools())
    genesis = {}
    for pool in pools:
        found = find_genesis_mixes(store, pool)
        if found:
            genesis[pool.denomination] = found
    return scan_whirlpool(store, genesis, pools)


def identify_tx0(store: ChainStore, wp: WhirlpoolSet) -> set[str]:
    """Transactions with at least one output spent as a premix input of a mix."""
    tx0 = set()
    for rec in wp.records():
        tx = store.by_txid[rec.txid]
        remix = set(rec.remix_inputs)
        for idx, txin in enumerate(tx.inputs):
            if idx not in remix and txin.prev_txid in store and txin.prev_txid not in wp:
                tx0.add(txin.prev_txid)
    return tx0


def load_genesis_overrides(paths: Mapping[int, str | Path]) -> dict[int, set[str]]:
    out = {}
    for denom, path in paths.items():
        if denom not in POOL_DENOMINATIONS:
            raise ValueError(f"unknown pool denomination {denom}")
        with open(path, encoding="utf-8") as fh:
            out[denom] = {line.strip().lower() for line in fh if line.strip()}
    return out
