"""Transaction records, NDJSON feed parsing and the chain index.

A feed line looks like::

    {"txid": "<64 hex>", "height": 600000, "time": 1571000000,
     "inputs": [{"prev_txid": "<64 hex>", "prev_vout": 0}],
     "outputs": [{"value": "0.10000000", "address": "bc1q...", "script": "p2wpkh"}]}

Amounts are decimal BTC strings and are converted to integer satoshis
without ever passing through a float.
"""
from __future__ import annotations

import gzip
import io
import json
import logging
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

logger = logging.getLogger(__name__)

SATS_PER_BTC = 100_000_000
P2WPKH = "p2wpkh"

_HEX64 = re.compile(r"^[0-9a-f]{64}$")


class FeedError(ValueError):
    """Base class for ingest errors. ``line_no`` is set when reading a feed."""

    line_no: int | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        return f"line {self.line_no}: {msg}" if self.line_no is not None else msg


class MalformedRecord(FeedError):
    pass


class PrecisionExceeded(FeedError):
    pass


class DuplicateTx(FeedError):
    pass


class OutOfOrder(FeedError):
    pass


class DoubleSpend(FeedError):
    pass


class NegativeFee(FeedError):
    pass


class UnknownOutpoint(LookupError):
    pass


def btc_to_sats(text: str) -> int:
    """Parse a decimal BTC string into satoshis, exactly."""
    if not isinstance(text, str):
        raise MalformedRecord(f"amount must be a decimal string, got {text!r}")
    try:
        dec = Decimal(text)
    except InvalidOperation:
        raise MalformedRecord(f"bad amount {text!r}") from None
    if not dec.is_finite():
        raise MalformedRecord(f"bad amount {text!r}")
    if -dec.as_tuple().exponent > 8:
        raise PrecisionExceeded(f"amount {text!r} has more than 8 decimal places")
    return int(dec * SATS_PER_BTC)


def sats_to_btc(sats: int) -> str:
    """Canonical 8-decimal representation, e.g. 10_000_000 -> '0.10000000'."""
    sign = "-" if sats < 0 else ""
    whole, frac = divmod(abs(sats), SATS_PER_BTC)
    return f"{sign}{whole}.{frac:08d}"


@dataclass(frozen=True, slots=True)
class TxInput:
    prev_txid: str
    prev_vout: int


@dataclass(frozen=True, slots=True)
class TxOutput:
    value: int
    address: str
    script: str = P2WPKH

    @property
    def is_p2wpkh(self) -> bool:
        return self.script == P2WPKH


@dataclass(frozen=True, slots=True)
class Transaction:
    txid: str
    height: int
    time: int
    inputs: tuple[TxInput, ...]
    outputs: tuple[TxOutput, ...]

    @property
    def output_sum(self) -> int:
        return sum(o.value for o in self.outputs)

    def to_record(self) -> dict:
        return {
            "txid": self.txid,
            "height": self.height,
            "time": self.time,
            "inputs": [{"prev_txid": i.prev_txid, "prev_vout": i.prev_vout} for i in self.inputs],
            "outputs": [
                {"value": sats_to_btc(o.value), "address": o.address, "script": o.script}
                for o in self.outputs
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


def _require(obj: dict, key: str, kind):
    if key not in obj:
        raise MalformedRecord(f"missing field {key!r}")
    val = obj[key]
    # bool is an int subclass; reject it for integer fields
    if kind is int and isinstance(val, bool) or not isinstance(val, kind):
        raise MalformedRecord(f"field {key!r} has wrong type {type(val).__name__}")
    return val


def _txid(value, key: str) -> str:
    if not isinstance(value, str) or not _HEX64.match(value.lower()):
        raise MalformedRecord(f"{key} is not a 64-char hex id: {value!r}")
    return value.lower()


def parse_tx_record(line: str) -> Transaction:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedRecord("record is not a JSON object")

    txid = _txid(_require(obj, "txid", str), "txid")
    height = _require(obj, "height", int)
    time = _require(obj, "time", int)
    if height < 0 or time < 0:
        raise MalformedRecord("height and time must be non-negative")

    raw_inputs = _require(obj, "inputs", list)
    raw_outputs = _require(obj, "outputs", list)
    if not raw_inputs:
        raise MalformedRecord("transaction has no inputs")
    if not raw_outputs:
        raise MalformedRecord("transaction has no outputs")

    inputs = []
    for raw in raw_inputs:
        if not isinstance(raw, dict):
            raise MalformedRecord("input is not an object")
        vout = _require(raw, "prev_vout", int)
        if vout < 0:
            raise MalformedRecord("prev_vout must be non-negative")
        inputs.append(TxInput(_txid(_require(raw, "prev_txid", str), "prev_txid"), vout))

    outputs = []
    for raw in raw_outputs:
        if not isinstance(raw, dict):
            raise MalformedRecord("output is not an object")
        if "value" not in raw:
            raise MalformedRecord("missing field 'value'")
        value = btc_to_sats(raw["value"])
        if value <= 0:
            raise MalformedRecord(f"output value must be positive, got {raw['value']!r}")
        address = _require(raw, "address", str)
        if not address:
            raise MalformedRecord("empty address")
        script = _require(raw, "script", str)
        outputs.append(TxOutput(value, address, script))

    return Transaction(txid, height, time, tuple(inputs), tuple(outputs))


def _open_text(path: str | Path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def iter_feed_lines(lines: Iterable[str]) -> Iterator[Transaction]:
    """Parse feed lines, skipping blanks and rejecting repeated txids."""
    seen: set[str] = set()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            tx = parse_tx_record(line)
            if tx.txid in seen:
                raise DuplicateTx(f"duplicate txid {tx.txid}")
        except FeedError as exc:
            exc.line_no = line_no
            raise
        seen.add(tx.txid)
        yield tx


def read_feed(path: str | Path) -> Iterator[Transaction]:
    """Stream transactions from a plain or gzip-compressed NDJSON file."""
    with _open_text(path) as fh:
        yield from iter_feed_lines(fh)


def write_feed(txs: Iterable[Transaction], path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as raw:
        if path.suffix == ".gz":
            # empty name and mtime=0 keep gzip output byte-identical across runs and paths
            stream = gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0)
        else:
            stream = raw
        with io.TextIOWrapper(stream, encoding="utf-8", newline="\n") as fh:
            for tx in txs:
                fh.write(tx.to_json())
                fh.write("\n")


Outpoint = tuple[str, int]


class Unresolved(NamedTuple):
    txid: str
    input_index: int
    prev: TxInput


@dataclass
class ChainStore:
    """Chronologically ordered transactions with output and spent indexes.

    Treat as immutable once :func:`build_chain_store` returns.
    """

    transactions: list[Transaction] = field(default_factory=list)
    by_txid: dict[str, Transaction] = field(default_factory=dict)
    position: dict[str, int] = field(default_factory=dict)
    spent: dict[Outpoint, str] = field(default_factory=dict)
    unresolved: list[Unresolved] = field(default_factory=list)
    height_time: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.transactions)

    def __iter__(self) -> Iterator[Transaction]:
        return iter(self.transactions)

    def __contains__(self, txid: str) -> bool:
        return txid in self.by_txid

    def output(self, txid: str, vout: int) -> TxOutput:
        tx = self.by_txid.get(txid)
        if tx is None or not 0 <= vout < len(tx.outputs):
            raise UnknownOutpoint(f"{txid}:{vout}")
        return tx.outputs[vout]

    def resolve(self, txin: TxInput) -> TxOutput:
        return self.output(txin.prev_txid, txin.prev_vout)

    def has_output(self, txid: str, vout: int) -> bool:
        tx = self.by_txid.get(txid)
        return tx is not None and 0 <= vout < len(tx.outputs)

    def spender(self, txid: str, vout: int) -> str | None:
        return self.spent.get((txid, vout))

    def input_values(self, tx: Transaction) -> list[int]:
        return [self.resolve(i).value for i in tx.inputs]

    def fee(self, tx: Transaction) -> int:
        return sum(self.input_values(tx)) - tx.output_sum

    @property
    def height_range(self) -> tuple[int, int] | None:
        if not self.transactions:
            return None
        return self.transactions[0].height, self.transactions[-1].height


def resolve_input(store: ChainStore, txin: TxInput) -> tuple[int, str]:
    out = store.resolve(txin)
    return out.value, out.address


def build_chain_store(records: Iterable[Transaction]) -> ChainStore:
    """Index a height-ordered stream of transactions in one pass.

    Inputs referencing unknown outputs are collected in ``store.unresolved``
    instead of failing; fee checks are skipped for those transactions.
    """
    store = ChainStore()
    last_height = -1
    for tx in records:
        if tx.height < last_height:
            raise OutOfOrder(f"{tx.txid} at height {tx.height} follows height {last_height}")
        if tx.txid in store.by_txid:
            raise DuplicateTx(f"duplicate txid {tx.txid}")
        last_height = tx.height

        in_sum = 0
        complete = True
        for idx, txin in enumerate(tx.inputs):
            key = (txin.prev_txid, txin.prev_vout)
            if not store.has_output(*key):
                store.unresolved.append(Unresolved(tx.txid, idx, txin))
                complete = False
                continue
            if key in store.spent:
                raise DoubleSpend(f"{key[0]}:{key[1]} spent by {store.spent[key]} and {tx.txid}")
            store.spent[key] = tx.txid
            in_sum += store.by_txid[txin.prev_txid].outputs[txin.prev_vout].value
        if complete and in_sum < tx.output_sum:
            raise NegativeFee(f"{tx.txid} spends {in_sum} sat but creates {tx.output_sum} sat")

        store.position[tx.txid] = len(store.transactions)
        store.transactions.append(tx)
        store.by_txid[tx.txid] = tx
        store.height_time.setdefault(tx.height, tx.time)

    if store.unresolved:
        logger.warning("%d inputs could not be resolved", len(store.unresolved))
    return store


def load_chain_store(path: str | Path) -> ChainStore:
    return build_chain_store(read_feed(path))
