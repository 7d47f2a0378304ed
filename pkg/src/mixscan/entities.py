"""Co-spent address clustering, entity graph and level traversal."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .chain import ChainStore, Transaction

logger = logging.getLogger(__name__)

EXCHANGE = "exchange"
CATEGORIES = ("exchange", "service", "other")


class Direction(str, Enum):
    """Traversal side, seen from the CoinJoin.

    SEND follows coins leaving CoinJoin outputs (downstream);
    RECEIVE follows the funding of CoinJoin inputs (upstream).
    """

    SEND = "send"
    RECEIVE = "receive"


class UnionFind:
    """Union-find keyed by address; each class remembers its smallest member."""

    def __init__(self):
        self._parent: dict[str, str] = {}
        self._rank: dict[str, int] = {}
        self._min: dict[str, str] = {}

    def add(self, x: str) -> None:
        if x not in self._parent:
            self._parent[x] = x
            self._rank[x] = 0
            self._min[x] = x

    def find(self, x: str) -> str:
        parent = self._parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self._rank[ra] < self._rank[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        if self._rank[ra] == self._rank[rb]:
            self._rank[ra] += 1
        if self._min[rb] < self._min[ra]:
            self._min[ra] = self._min[rb]

    def representative(self, x: str) -> str:
        return self._min[self.find(x)]

    def __iter__(self):
        return iter(self._parent)


@dataclass
class EntityGraph:
    """Directed entity-to-entity payment edges (distinct counterparties)."""

    out: dict[str, set[str]] = field(default_factory=dict)
    inn: dict[str, set[str]] = field(default_factory=dict)

    def out_degree(self, e: str) -> int:
        return len(self.out.get(e, ()))

    def in_degree(self, e: str) -> int:
        return len(self.inn.get(e, ()))

    def neighbors(self, e: str, direction: Direction) -> set[str]:
        adj = self.out if direction is Direction.SEND else self.inn
        return adj.get(e, set())

    def degree(self, e: str, direction: Direction) -> int:
        return len(self.neighbors(e, direction))

    def add_edge(self, src: str, dst: str) -> None:
        self.out.setdefault(src, set()).add(dst)
        self.inn.setdefault(dst, set()).add(src)


@dataclass
class EntityMap:
    entity: dict[str, str]
    sizes: dict[str, int]
    excluded_txids: frozenset[str] = frozenset()
    graph: EntityGraph | None = None

    def entity_of(self, address: str) -> str:
        # addresses never seen on chain are their own singleton entity
        return self.entity.get(address, address)

    def cluster_size(self, address: str) -> int:
        return self.sizes.get(self.entity_of(address), 1)

    def members(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for addr, ent in self.entity.items():
            groups.setdefault(ent, []).append(addr)
        for addrs in groups.values():
            addrs.sort()
        return groups

    def in_degree(self, e: str) -> int:
        return self.graph.in_degree(e) if self.graph else 0

    def out_degree(self, e: str) -> int:
        return self.graph.out_degree(e) if self.graph else 0

    def __len__(self) -> int:
        return len(self.sizes)


def likely_coinjoin(tx: Transaction, min_equal: int = 3) -> bool:
    """Cheap pre-filter: several inputs and some value repeated ``min_equal`` times."""
    if len(tx.inputs) < 2 or len(tx.outputs) < min_equal:
        return False
    return max(Counter(o.value for o in tx.outputs).values()) >= min_equal


def cluster_entities(
    store: ChainStore,
    coinjoin_txids: Iterable[str] = (),
    prefilter: bool = False,
) -> EntityMap:
    excluded = set(coinjoin_txids)
    uf = UnionFind()
    for tx in store:
        for out in tx.outputs:
            uf.add(out.address)
        if tx.txid in excluded:
            continue
        if prefilter and likely_coinjoin(tx):
            excluded.add(tx.txid)
            continue
        addrs = [store.resolve(i).address for i in tx.inputs if store.has_output(i.prev_txid, i.prev_vout)]
        for a in addrs[1:]:
            uf.union(addrs[0], a)

    entity = {addr: uf.representative(addr) for addr in uf}
    sizes = Counter(entity.values())
    return EntityMap(entity=entity, sizes=dict(sizes), excluded_txids=frozenset(excluded))


def build_entity_graph(store: ChainStore, entities: EntityMap) -> EntityGraph:
    graph = EntityGraph()
    for tx in store:
        if tx.txid in entities.excluded_txids:
            continue
        senders = {
            entities.entity_of(store.resolve(i).address)
            for i in tx.inputs
            if store.has_output(i.prev_txid, i.prev_vout)
        }
        receivers = {entities.entity_of(o.address) for o in tx.outputs}
        for s in senders:
            for r in receivers:
                if s != r:
                    graph.add_edge(s, r)
    return graph


def compute_degrees(store: ChainStore, entities: EntityMap) -> EntityMap:
    """Return a copy of ``entities`` carrying the distinct-counterparty graph.

    Transactions excluded from clustering (CoinJoins) contribute no edges.
    """
    return replace(entities, graph=build_entity_graph(store, entities))


def traverse_levels(
    graph: EntityGraph,
    seeds: Iterable[str],
    t: int,
    direction: Direction,
    max_level: int = 2,
) -> dict[str, int]:
    """Breadth-first levels from ``seeds``.

    An entity whose degree along ``direction`` exceeds ``t`` is assigned a
    level but never expanded.
    """
    levels = {s: 0 for s in seeds}
    frontier = list(levels)
    for k in range(1, max_level + 1):
        nxt = []
        for e in frontier:
            if graph.degree(e, direction) > t:
                continue
            for n in graph.neighbors(e, direction):
                if n not in levels:
                    levels[n] = k
                    nxt.append(n)
        frontier = nxt
    return levels


@dataclass
class LevelAssignment:
    levels: dict[str, int]
    t: int
    direction: Direction

    def at(self, level: int) -> set[str]:
        return {e for e, lv in self.levels.items() if lv == level}


def coinjoin_seed_entities(
    store: ChainStore, entities: EntityMap, coinjoin_txids: Iterable[str], direction: Direction
) -> set[str]:
    seeds = set()
    for txid in coinjoin_txids:
        tx = store.by_txid[txid]
        if direction is Direction.SEND:
            seeds.update(entities.entity_of(o.address) for o in tx.outputs)
        else:
            seeds.update(
                entities.entity_of(store.resolve(i).address)
                for i in tx.inputs
                if store.has_output(i.prev_txid, i.prev_vout)
            )
    return seeds


def assign_levels(
    store: ChainStore,
    entities: EntityMap,
    coinjoin_txids: Iterable[str],
    t: int,
    direction: Direction | str,
) -> LevelAssignment:
    direction = Direction(direction)
    if entities.graph is None:
        entities = compute_degrees(store, entities)
    seeds = coinjoin_seed_entities(store, entities, coinjoin_txids, direction)
    return LevelAssignment(traverse_levels(entities.graph, seeds, t, direction), t, direction)


@dataclass(frozen=True)
class AttributionTag:
    target_type: str
    target: str
    label: str
    category: str


def load_tags(path: str | Path) -> list[AttributionTag]:
    tags = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            ttype = row["target_type"].strip()
            category = row["category"].strip()
            if ttype not in ("address", "entity"):
                raise ValueError(f"bad target_type {ttype!r}")
            if category not in CATEGORIES:
                raise ValueError(f"bad category {category!r}")
            tags.append(AttributionTag(ttype, row["target"].strip(), row["label"].strip(), category))
    return tags


def attribute_entities(entities: EntityMap, tags: Iterable[AttributionTag]) -> dict[str, AttributionTag]:
    """Lift tags onto entities. Conflicting categories resolve to exchange."""
    out: dict[str, AttributionTag] = {}
    for tag in tags:
        if tag.target_type == "address":
            if tag.target not in entities.entity:
                logger.info("tag for unknown address %s skipped", tag.target)
                continue
            ent = entities.entity[tag.target]
        else:
            if tag.target not in entities.sizes:
                logger.info("tag for unknown entity %s skipped", tag.target)
                continue
            ent = tag.target
        prev = out.get(ent)
        if prev is None:
            out[ent] = AttributionTag("entity", ent, tag.label, tag.category)
        elif prev.category != tag.category:
            logger.warning(
                "conflicting tags on entity %s: %s vs %s", ent, prev.category, tag.category
            )
            if tag.category == EXCHANGE:
                out[ent] = AttributionTag("entity", ent, tag.label, tag.category)
    return out


def exchange_entities(attribution: Mapping[str, AttributionTag]) -> set[str]:
    return {e for e, tag in attribution.items() if tag.category == EXCHANGE}


def match_exchanges(levels: LevelAssignment, attribution: Mapping[str, AttributionTag]) -> dict[int, set[str]]:
    exchanges = exchange_entities(attribution)
    result: dict[int, set[str]] = {0: set(), 1: set(), 2: set()}
    for ent, lv in levels.levels.items():
        if ent in exchanges:
            result.setdefault(lv, set()).add(ent)
    return result
