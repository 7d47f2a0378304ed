"""Monthly series over detected CoinJoins: counts, mixed/fresh flows,
exchange flows, anonymity bounds and pre/post-mixing anonymity sets.

Streams are keyed ``(protocol, pool)`` where ``pool`` is the Whirlpool
denomination in satoshis, or None for the protocol aggregate.
"""
from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .chain import SATS_PER_BTC, ChainStore, Transaction
from .detect import SAMOURAI, WASABI, DetectionSet
from .entities import EntityMap

logger = logging.getLogger(__name__)

Stream = tuple[str, "int | None"]

WASABI_BETA = 1_000_000
WASABI_ELIGIBLE_MULTIPLICITY = 3


def month_of(timestamp: int) -> str:
    return datetime.fromtimestamp(timestamp, timezone.utc).strftime("%Y-%m")


def day_of(timestamp: int) -> date:
    return datetime.fromtimestamp(timestamp, timezone.utc).date()


def month_range(first: str, last: str) -> list[str]:
    y, m = map(int, first.split("-"))
    ly, lm = map(int, last.split("-"))
    out = []
    while (y, m) <= (ly, lm):
        out.append(f"{y:04d}-{m:02d}")
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


def _streams(ds: DetectionSet) -> list[Stream]:
    return [(WASABI, None), (SAMOURAI, None)] + [(SAMOURAI, d) for d in sorted(ds.whirlpool.pools)]


def _cj_stream(ds: DetectionSet, txid: str) -> tuple[str, int | None] | None:
    proto = ds.protocol_of(txid)
    if proto is None:
        return None
    return proto, ds.whirlpool.pool_of(txid) if proto == SAMOURAI else None


def _stream_keys(proto: str, pool: int | None) -> list[Stream]:
    keys: list[Stream] = [(proto, None)]
    if pool is not None:
        keys.append((proto, pool))
    return keys


def _detected_months(store: ChainStore, ds: DetectionSet) -> list[str]:
    times = [store.by_txid[t].time for t in ds.coinjoin_txids()]
    if not times:
        return []
    return month_range(month_of(min(times)), month_of(max(times)))


# ---------------------------------------------------------------- counts


def monthly_counts(store: ChainStore, ds: DetectionSet) -> list[dict]:
    counts: Counter = Counter()
    for txid in ds.coinjoin_txids():
        proto, pool = _cj_stream(ds, txid)
        month = month_of(store.by_txid[txid].time)
        for key in _stream_keys(proto, pool):
            counts[key, month] += 1
    rows = []
    for month in _detected_months(store, ds):
        for proto, pool in _streams(ds):
            rows.append({"month": month, "protocol": proto, "pool": pool, "tx_count": counts[(proto, pool), month]})
    return rows


# ---------------------------------------------------------------- flow ledger


class Status(str, Enum):
    REMIX = "remix-spent"
    EXIT = "mixed-exit"
    UNSPENT = "unspent"


@dataclass(frozen=True)
class OutputStatus:
    txid: str
    vout: int
    protocol: str
    pool: int | None
    value: int
    address: str
    eligible: bool
    status: Status
    spender: str | None


FLOW_KINDS = ("fresh_in", "remix_in", "fees", "mixed_exit", "change_exit")


@dataclass
class MixFlowLedger:
    outputs: dict[tuple[str, int], OutputStatus] = field(default_factory=dict)
    # (stream, kind) -> day -> satoshis
    daily: dict[tuple[Stream, str], dict[date, int]] = field(default_factory=lambda: defaultdict(Counter))
    streams: list[Stream] = field(default_factory=list)

    def add(self, stream: Stream, kind: str, day: date, sats: int) -> None:
        self.daily[stream, kind][day] += sats

    def monthly(self, stream: Stream, kind: str) -> Counter:
        out: Counter = Counter()
        for day, sats in self.daily.get((stream, kind), {}).items():
            out[day.strftime("%Y-%m")] += sats
        return out

    def total(self, stream: Stream, kind: str) -> int:
        return sum(self.daily.get((stream, kind), {}).values())

    def output_total(self, protocol: str, status: Status, eligible: bool | None = None) -> int:
        return sum(
            o.value
            for o in self.outputs.values()
            if o.protocol == protocol and o.status is status and (eligible is None or o.eligible == eligible)
        )

    def months(self) -> list[str]:
        days = [d for per_day in self.daily.values() for d in per_day]
        if not days:
            return []
        return month_range(min(days).strftime("%Y-%m"), max(days).strftime("%Y-%m"))


def eligible_outputs(tx: Transaction, protocol: str) -> list[bool]:
    """Which outputs carry mixed coins: all of a Whirlpool mix, and the Wasabi
    outputs whose value repeats at least three times (change is excluded)."""
    if protocol == SAMOURAI:
        return [True] * len(tx.outputs)
    counts = Counter(o.value for o in tx.outputs)
    return [counts[o.value] >= WASABI_ELIGIBLE_MULTIPLICITY for o in tx.outputs]


def mixed_and_fresh_flows(store: ChainStore, ds: DetectionSet) -> MixFlowLedger:
    ledger = MixFlowLedger(streams=_streams(ds))
    for tx in store:
        stream = _cj_stream(ds, tx.txid)
        if stream is None:
            continue
        proto, pool = stream
        day = day_of(tx.time)
        keys = _stream_keys(proto, pool)

        in_sum = 0
        for txin in tx.inputs:
            if not store.has_output(txin.prev_txid, txin.prev_vout):
                logger.warning("unresolved CoinJoin input in %s skipped", tx.txid)
                continue
            value = store.resolve(txin).value
            in_sum += value
            kind = "remix_in" if ds.protocol_of(txin.prev_txid) == proto else "fresh_in"
            for key in keys:
                ledger.add(key, kind, day, value)
        for key in keys:
            ledger.add(key, "fees", day, in_sum - tx.output_sum)

        for vout, (out, eligible) in enumerate(zip(tx.outputs, eligible_outputs(tx, proto))):
            spender = store.spender(tx.txid, vout)
            if spender is None:
                status = Status.UNSPENT
            elif ds.protocol_of(spender) == proto:
                status = Status.REMIX
            else:
                status = Status.EXIT
                spend_day = day_of(store.by_txid[spender].time)
                for key in keys:
                    ledger.add(key, "mixed_exit" if eligible else "change_exit", spend_day, out.value)
            ledger.outputs[tx.txid, vout] = OutputStatus(
                tx.txid, vout, proto, pool, out.value, out.address, eligible, status, spender
            )
    return ledger


def conservation_check(ledger: MixFlowLedger, protocol: str) -> dict[str, int]:
    """Exact satoshi balance of one protocol's CoinJoins.

    inflow  = fresh_in + remix_in
    outflow = remix-spent + mixed-exit (incl. change) + unspent + fees
    ``residual`` is inflow - outflow and must be 0.
    """
    key = (protocol, None)
    fresh = ledger.total(key, "fresh_in")
    remix_in = ledger.total(key, "remix_in")
    fees = ledger.total(key, "fees")
    remix = ledger.output_total(protocol, Status.REMIX)
    exits = ledger.output_total(protocol, Status.EXIT)
    unspent = ledger.output_total(protocol, Status.UNSPENT)
    return {
        "fresh_in": fresh,
        "remix_in": remix_in,
        "remix_spent": remix,
        "mixed_exit": ledger.output_total(protocol, Status.EXIT, eligible=True),
        "change_exit": ledger.output_total(protocol, Status.EXIT, eligible=False),
        "unspent": unspent,
        "fees": fees,
        "residual": fresh + remix_in - (remix + exits + unspent + fees),
    }


# ---------------------------------------------------------------- USD


class RateGap(LookupError):
    pass


class RateTable:
    """Daily closing BTC/USD rates with a bounded look-back for missing days."""

    def __init__(self, rates: Mapping[date, Decimal], max_gap_days: int = 7):
        self.rates = dict(rates)
        self.max_gap = max_gap_days
        self._warned: set[date] = set()

    @classmethod
    def from_csv(cls, path: str | Path, max_gap_days: int = 7) -> RateTable:
        rates = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rates[date.fromisoformat(row["date"].strip())] = Decimal(row["rate"].strip())
        return cls(rates, max_gap_days)

    def rate(self, day: date) -> Decimal:
        for back in range(self.max_gap + 1):
            r = self.rates.get(day - timedelta(days=back))
            if r is not None:
                if back and day not in self._warned:
                    self._warned.add(day)
                    logger.warning("no rate for %s, using %s", day, day - timedelta(days=back))
                return r
        raise RateGap(f"no rate within {self.max_gap} days before {day}")


def usd_convert(daily: Mapping[date, int], rates: RateTable) -> dict[str, Decimal]:
    """Convert per-day satoshi amounts at that day's rate, then sum per month."""
    out: dict[str, Decimal] = defaultdict(Decimal)
    for day in sorted(daily):
        out[day.strftime("%Y-%m")] += Decimal(daily[day]) * rates.rate(day) / SATS_PER_BTC
    return dict(out)


def _usd(value: Decimal) -> str:
    return str(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


# ---------------------------------------------------------------- exchange flows


def exchange_hops(entities: EntityMap, start: str, exchanges: set[str], t: int) -> int | None:
    """Shortest hop count (1 or 2) from ``start`` to an exchange entity, following
    payments out of entities with out-degree <= t."""
    graph = entities.graph
    if graph is None or graph.out_degree(start) > t:
        return None
    first = graph.out.get(start, set())
    if first & exchanges:
        return 1
    for mid in sorted(first):
        if graph.out_degree(mid) <= t and graph.out.get(mid, set()) & exchanges:
            return 2
    return None


def exchange_flow_series(
    store: ChainStore,
    ds: DetectionSet,
    ledger: MixFlowLedger,
    entities: EntityMap,
    exchanges: set[str],
    t: int = 100,
) -> list[dict]:
    """Cumulative CoinJoins (and mixed satoshis) reaching exchanges in one or two hops.

    Each mixed-exit output is attributed once, at its shortest hop count; a
    CoinJoin is counted in the month it was mined.
    """
    cache: dict[str, int | None] = {}
    tx_hits: dict[str, set[int]] = defaultdict(set)
    amounts: Counter = Counter()
    for o in ledger.outputs.values():
        if o.status is not Status.EXIT or not o.eligible:
            continue
        ent = entities.entity_of(o.address)
        if ent not in cache:
            cache[ent] = exchange_hops(entities, ent, exchanges, t)
        hop = cache[ent]
        if hop is None:
            continue
        tx_hits[o.txid].add(hop)
        amounts[o.protocol, month_of(store.by_txid[o.txid].time), hop] += o.value

    counts: Counter = Counter()
    for txid, hops in tx_hits.items():
        month = month_of(store.by_txid[txid].time)
        proto = ds.protocol_of(txid)
        for hop in hops:
            counts[proto, month, hop] += 1

    rows = []
    running = Counter()
    for month in _detected_months(store, ds):
        for proto in (WASABI, SAMOURAI):
            for hop in (1, 2):
                running[proto, "tx", hop] += counts[proto, month, hop]
                running[proto, "sat", hop] += amounts[proto, month, hop]
            rows.append({
                "month": month,
                "protocol": proto,
                "direct_tx_cum": running[proto, "tx", 1],
                "indirect_tx_cum": running[proto, "tx", 2],
                "direct_sat_cum": running[proto, "sat", 1],
                "indirect_sat_cum": running[proto, "sat", 2],
            })
    return rows


# ---------------------------------------------------------------- anonymity bounds


@dataclass(frozen=True)
class AnonymityBound:
    month: str
    protocol: str
    pool: int | None
    alpha: int
    beta: int

    @property
    def bound(self) -> int:
        return self.alpha // self.beta


def active_balance(ledger: MixFlowLedger, stream: Stream, months: list[str] | None = None) -> list[tuple[str, int]]:
    """Month-end satoshis still inside the mix: fresh inflow minus everything
    that left (mixed outputs, change, miner fees)."""
    months = months if months is not None else ledger.months()
    fresh = ledger.monthly(stream, "fresh_in")
    gone = ledger.monthly(stream, "mixed_exit") + ledger.monthly(stream, "change_exit") + ledger.monthly(stream, "fees")
    alpha, out = 0, []
    for month in months:
        alpha += fresh[month] - gone[month]
        out.append((month, alpha))
    return out


def anonymity_upper_bound(
    ledger: MixFlowLedger, beta: int, stream: Stream = (WASABI, None), months: list[str] | None = None
) -> list[AnonymityBound]:
    if beta <= 0:
        raise ValueError("beta must be positive")
    return [AnonymityBound(m, stream[0], stream[1], a, beta) for m, a in active_balance(ledger, stream, months)]


def default_beta(stream: Stream, ds: DetectionSet) -> int:
    proto, pool = stream
    if proto == WASABI:
        return WASABI_BETA
    if pool is not None:
        return pool
    active = [d for d, mixes in ds.whirlpool.pools.items() if mixes]
    return min(active) if active else min(ds.whirlpool.pools or {100_000: None})


def anonymity_bounds(ledger: MixFlowLedger, ds: DetectionSet) -> list[AnonymityBound]:
    months = ledger.months()
    out = []
    for stream in ledger.streams:
        out.extend(anonymity_upper_bound(ledger, default_beta(stream, ds), stream, months))
    out.sort(key=lambda b: (b.month, b.protocol, -1 if b.pool is None else b.pool))
    return out


# ---------------------------------------------------------------- pre/post anonymity


def _funding_entity(store: ChainStore, entities: EntityMap, prev_txid: str, address: str) -> str:
    """Entity that funded ``address``: the sole input entity of the creating
    transaction, or the address's own entity when that is ambiguous."""
    src = store.by_txid[prev_txid]
    senders = {
        entities.entity_of(store.resolve(i).address)
        for i in src.inputs
        if store.has_output(i.prev_txid, i.prev_vout)
    }
    if len(senders) == 1:
        return senders.pop()
    return entities.entity_of(address)


def _recipient_entity(store: ChainStore, entities: EntityMap, spender_txid: str, address: str) -> str:
    """Counterparty receiving the largest share of the spending transaction,
    ignoring outputs back to the spender; ties go to the smallest entity id."""
    own = entities.entity_of(address)
    received: Counter = Counter()
    for out in store.by_txid[spender_txid].outputs:
        ent = entities.entity_of(out.address)
        if ent != own:
            received[ent] += out.value
    if not received:
        return own
    return min(received, key=lambda e: (-received[e], e))


def pre_post_anonymity(
    store: ChainStore, ds: DetectionSet, ledger: MixFlowLedger, entities: EntityMap
) -> list[dict]:
    # (protocol, side, month) -> address -> entity (first occurrence wins)
    seen: dict[tuple[str, str, str], dict[str, str]] = defaultdict(dict)

    for tx in store:
        proto = ds.protocol_of(tx.txid)
        if proto is None:
            continue
        month = month_of(tx.time)
        for txin in tx.inputs:
            if not store.has_output(txin.prev_txid, txin.prev_vout):
                continue
            if ds.protocol_of(txin.prev_txid) == proto:
                continue
            addr = store.resolve(txin).address
            bucket = seen[proto, "pre", month]
            if addr not in bucket:
                bucket[addr] = _funding_entity(store, entities, txin.prev_txid, addr)

    exits = sorted(
        (o for o in ledger.outputs.values() if o.status is Status.EXIT and o.eligible),
        key=lambda o: (store.position[o.spender], o.txid, o.vout),
    )
    for o in exits:
        month = month_of(store.by_txid[o.spender].time)
        bucket = seen[o.protocol, "post", month]
        if o.address not in bucket:
            bucket[o.address] = _recipient_entity(store, entities, o.spender, o.address)

    if not seen:
        return []
    months = sorted({m for (_, _, m) in seen})
    rows = []
    for month in month_range(months[0], months[-1]):
        for proto in (WASABI, SAMOURAI):
            for side in ("pre", "post"):
                bucket = seen.get((proto, side, month), {})
                rows.append({
                    "month": month,
                    "protocol": proto,
                    "side": side,
                    "address_count": len(bucket),
                    "entity_count": len(set(bucket.values())),
                })
    return rows


# ---------------------------------------------------------------- remix-less


def remixless_coinjoins(store: ChainStore, ds: DetectionSet) -> list[str]:
    wasabi = ds.wasabi
    out = []
    for tx in store:
        if tx.txid in wasabi and not any(i.prev_txid in wasabi for i in tx.inputs):
            out.append(tx.txid)
    return out


# ---------------------------------------------------------------- CSV output

HEADERS = {
    "monthly_counts.csv": ["month", "protocol", "pool", "tx_count"],
    "mix_flows.csv": ["month", "protocol", "pool", "fresh_in_sat", "remix_in_sat", "fees_sat",
                      "mixed_exit_sat", "change_exit_sat"],
    "exchange_flows.csv": ["month", "protocol", "direct_tx_cum", "indirect_tx_cum",
                           "direct_sat_cum", "indirect_sat_cum"],
    "anonymity_bounds.csv": ["month", "protocol", "pool", "alpha_sat", "beta_sat", "bound"],
    "pre_post_anonymity.csv": ["month", "protocol", "side", "address_count", "entity_count"],
    "remixless.csv": ["txid", "height", "n_inputs"],
}
USD_COLUMNS = {
    "mix_flows.csv": ["fresh_in_usd", "mixed_exit_usd"],
    "exchange_flows.csv": ["direct_usd_cum", "indirect_usd_cum"],
}


def _write_csv(path: Path, header: list[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", extrasaction="raise")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in header})


def mix_flow_rows(ledger: MixFlowLedger, rates: RateTable | None = None) -> list[dict]:
    rows = []
    months = ledger.months()
    for stream in ledger.streams:
        series = {kind: ledger.monthly(stream, kind) for kind in FLOW_KINDS}
        usd = {}
        if rates is not None:
            for kind in ("fresh_in", "mixed_exit"):
                usd[kind] = usd_convert(ledger.daily.get((stream, kind), {}), rates)
        for month in months:
            row = {
                "month": month,
                "protocol": stream[0],
                "pool": stream[1],
                "fresh_in_sat": series["fresh_in"][month],
                "remix_in_sat": series["remix_in"][month],
                "fees_sat": series["fees"][month],
                "mixed_exit_sat": series["mixed_exit"][month],
                "change_exit_sat": series["change_exit"][month],
            }
            if rates is not None:
                row["fresh_in_usd"] = _usd(usd["fresh_in"].get(month, Decimal(0)))
                row["mixed_exit_usd"] = _usd(usd["mixed_exit"].get(month, Decimal(0)))
            rows.append(row)
    rows.sort(key=lambda r: (r["month"], r["protocol"], -1 if r["pool"] is None else r["pool"]))
    return rows


def _exchange_usd(
    store: ChainStore, ledger: MixFlowLedger, entities: EntityMap, exchanges: set[str], t: int, rates: RateTable
) -> dict[tuple[str, int], dict[date, int]]:
    daily: dict[tuple[str, int], Counter] = defaultdict(Counter)
    for o in ledger.outputs.values():
        if o.status is Status.EXIT and o.eligible:
            hop = exchange_hops(entities, entities.entity_of(o.address), exchanges, t)
            if hop is not None:
                daily[o.protocol, hop][day_of(store.by_txid[o.txid].time)] += o.value
    return daily


def write_reports(
    outdir: str | Path,
    store: ChainStore,
    ds: DetectionSet,
    entities: EntityMap,
    exchanges: set[str],
    t: int = 100,
    rates: RateTable | None = None,
) -> dict[str, int]:
    """Write every report CSV into ``outdir``; returns row counts per file."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ledger = mixed_and_fresh_flows(store, ds)

    tables: dict[str, list[dict]] = {}
    tables["monthly_counts.csv"] = monthly_counts(store, ds)
    tables["mix_flows.csv"] = mix_flow_rows(ledger, rates)
    tables["exchange_flows.csv"] = exchange_flow_series(store, ds, ledger, entities, exchanges, t)
    if rates is not None:
        per = _exchange_usd(store, ledger, entities, exchanges, t, rates)
        cum = Counter()
        monthly = {key: usd_convert(days, rates) for key, days in per.items()}
        for row in tables["exchange_flows.csv"]:
            for hop, col in ((1, "direct_usd_cum"), (2, "indirect_usd_cum")):
                cum[row["protocol"], hop] += monthly.get((row["protocol"], hop), {}).get(row["month"], Decimal(0))
                row[col] = _usd(cum[row["protocol"], hop])
    tables["anonymity_bounds.csv"] = [
        {"month": b.month, "protocol": b.protocol, "pool": b.pool, "alpha_sat": b.alpha,
         "beta_sat": b.beta, "bound": b.bound}
        for b in anonymity_bounds(ledger, ds)
    ]
    tables["pre_post_anonymity.csv"] = pre_post_anonymity(store, ds, ledger, entities)
    tables["remixless.csv"] = [
        {"txid": txid, "height": store.by_txid[txid].height, "n_inputs": len(store.by_txid[txid].inputs)}
        for txid in remixless_coinjoins(store, ds)
    ]

    for name, rows in tables.items():
        header = HEADERS[name] + (USD_COLUMNS.get(name, []) if rates is not None else [])
        _write_csv(outdir / name, header, rows)
    return {name: len(rows) for name, rows in tables.items()}
