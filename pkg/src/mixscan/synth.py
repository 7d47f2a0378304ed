"""Deterministic synthetic chains with ground-truth labels.

The generator threads a UTXO set through a sequence of events (Wasabi
rounds, Whirlpool mixes, ordinary payments, exits from the mixes) so every
emitted transaction spends outputs that exist earlier in the feed. Only the
single faucet transaction at the start has an unresolvable input.
"""
from __future__ import annotations

import csv
import hashlib
import json
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .chain import P2WPKH, Transaction, TxInput, TxOutput, write_feed
from .wasabi import WcdhConfig
from .whirlpool import DEFAULT_PREMIX_TOLERANCE, POOL_DENOMINATIONS

BLOCK_SECONDS = 600
BLOCKS_PER_DAY = 144
DUST = 5_000
OTHER_SCRIPTS = ("p2pkh", "p2sh", "p2tr")
NEAR_MISS_WASABI = ("equal_outputs", "band", "unique_values", "inputs")
NEAR_MISS_WHIRLPOOL = ("value", "inputs", "outputs")

WASABI = "wasabi"
WHIRLPOOL = "whirlpool"
TX0 = "tx0"
BACKGROUND = "background"


@dataclass
class ScenarioPlan:
    seed: int = 0
    n_wasabi: int = 50
    wasabi_outputs: tuple[int, int] = (10, 100)
    wasabi_remix_prob: float = 0.3
    wasabi_standalone: int = 1
    wasabi_static_fraction: float = 0.2
    coordinator_addresses: tuple[str, ...] = (
        "bc1qwasabicoordinator000000000000000000001",
        "bc1qwasabicoordinator000000000000000000002",
    )
    wasabi_near_miss: int = 0
    # pool denomination (sat) -> number of mixes, genesis included
    whirlpool_mixes: dict[int, int] = field(default_factory=lambda: {d: 25 for d in POOL_DENOMINATIONS})
    whirlpool_genesis: dict[int, int] = field(default_factory=lambda: {d: 1 for d in POOL_DENOMINATIONS})
    premix_tolerance: int = DEFAULT_PREMIX_TOLERANCE
    tx0_outputs: tuple[int, int] = (2, 10)
    whirlpool_decoys: int = 0
    whirlpool_near_miss: int = 0
    n_background: int = 100
    exits_per_event: float = 2.0
    # protocol -> (direct, indirect) planted flows into exchanges
    exchange_plants: dict[str, tuple[int, int]] = field(default_factory=lambda: {WASABI: (0, 0), WHIRLPOOL: (0, 0)})
    n_exchanges: int = 3
    star_plants: tuple[int, ...] = ()
    collector_plants: tuple[int, ...] = ()
    start_time: int = 1_546_300_800  # 2019-01-01T00:00:00Z
    start_height: int = 556_000
    span_days: int = 120

    def __post_init__(self):
        # JSON round-trips turn tuples into lists and int keys into strings
        self.wasabi_outputs = tuple(self.wasabi_outputs)
        self.tx0_outputs = tuple(self.tx0_outputs)
        self.coordinator_addresses = tuple(self.coordinator_addresses)
        self.star_plants = tuple(self.star_plants)
        self.collector_plants = tuple(self.collector_plants)
        self.whirlpool_mixes = {int(k): int(v) for k, v in self.whirlpool_mixes.items()}
        self.whirlpool_genesis = {int(k): int(v) for k, v in self.whirlpool_genesis.items()}
        self.exchange_plants = {k: tuple(v) for k, v in self.exchange_plants.items()}
        lo, hi = self.wasabi_outputs
        if not 10 <= lo <= hi:
            raise ValueError("wasabi_outputs must satisfy 10 <= lo <= hi")
        for denom, n in self.whirlpool_mixes.items():
            if denom not in POOL_DENOMINATIONS:
                raise ValueError(f"unknown pool {denom}")
            g = self.whirlpool_genesis.get(denom, 0)
            if n and not 1 <= g <= n:
                raise ValueError(f"pool {denom}: need 1 <= genesis <= mixes")
        if self.n_wasabi and not 1 <= self.wasabi_standalone <= self.n_wasabi:
            raise ValueError("wasabi_standalone must be in [1, n_wasabi]")
        n_plants = len(self.star_plants) + len(self.collector_plants) + sum(self.exchange_plants.get(WASABI, (0, 0)))
        if n_plants > self.n_wasabi:
            raise ValueError("more Wasabi plants than Wasabi mixes")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ScenarioPlan:
        return cls(**json.loads(text))


@dataclass
class SyntheticCorpus:
    plan: ScenarioPlan
    transactions: list[Transaction]
    labels: dict[str, tuple[str, int | None]]
    truth: dict
    tags: list[tuple[str, str, str, str]]

    def txids_with(self, label: str, pool: int | None = None) -> set[str]:
        return {t for t, (lab, p) in self.labels.items() if lab == label and (pool is None or p == pool)}

    def write(self, outdir: str | Path, gzip_feed: bool = False) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "feed": outdir / ("feed.ndjson.gz" if gzip_feed else "feed.ndjson"),
            "labels": outdir / "labels.csv",
            "plan": outdir / "plan.json",
            "truth": outdir / "truth.json",
            "tags": outdir / "tags.csv",
            "coordinators": outdir / "coordinators.txt",
        }
        write_feed(self.transactions, paths["feed"])
        with open(paths["labels"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["txid", "label", "pool"])
            for tx in self.transactions:
                label, pool = self.labels[tx.txid]
                w.writerow([tx.txid, label, "" if pool is None else pool])
        paths["plan"].write_text(self.plan.to_json() + "\n", encoding="utf-8")
        paths["truth"].write_text(json.dumps(self.truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        with open(paths["tags"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target_type", "target", "label", "category"])
            w.writerows(self.tags)
        paths["coordinators"].write_text("".join(a + "\n" for a in self.plan.coordinator_addresses), encoding="utf-8")
        return paths


def read_labels(path: str | Path) -> dict[str, tuple[str, int | None]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {
            row["txid"]: (row["label"], int(row["pool"]) if row["pool"] else None)
            for row in csv.DictReader(fh)
        }


Outpoint = tuple[str, int]


class ChainBuilder:
    """Mutable generator state: UTXO pools, clock and emitted transactions."""

    def __init__(self, plan: ScenarioPlan, wcdh: WcdhConfig = WcdhConfig()):
        self.plan = plan
        self.wcdh = wcdh
        self.rng = random.Random(plan.seed)
        self._n_tx = 0
        self._n_addr = 0
        self.height = plan.start_height
        self.txs: list[Transaction] = []
        self.by_txid: dict[str, Transaction] = {}
        self.labels: dict[str, tuple[str, int | None]] = {}

        self.users: list[tuple[Outpoint, int]] = []
        self.wasabi_pool: list[tuple[Outpoint, int]] = []
        self.wp_pool: dict[int, list[tuple[Outpoint, int]]] = defaultdict(list)
        self.premix: dict[int, list[tuple[Outpoint, int]]] = defaultdict(list)
        self.hot: dict[str, tuple[Outpoint, int]] = {}
        self.hot_addr: dict[str, str] = {}

        self.truth: dict = {
            "wasabi_near_miss": {},
            "whirlpool_near_miss": {},
            "whirlpool_decoys": [],
            "genesis": defaultdict(list),
            "wasabi_remixless": [],
            "wasabi_static": [],
            "star": [],
            "collector": [],
            "exchange_flows": {WASABI: {"direct": [], "indirect": []}, WHIRLPOOL: {"direct": [], "indirect": []}},
            "ledger": {p: Counter() for p in (WASABI, WHIRLPOOL)},
            "alpha": {WASABI: {}, WHIRLPOOL: {}},
        }
        self._faucet()

    # ------------------------------------------------------------ primitives

    def _hash(self, kind: str, n: int) -> str:
        return hashlib.sha256(f"{self.plan.seed}:{kind}:{n}".encode()).hexdigest()

    def address(self) -> str:
        self._n_addr += 1
        return "bc1q" + self._hash("addr", self._n_addr)[:36]

    @property
    def time(self) -> int:
        return self.plan.start_time + (self.height - self.plan.start_height) * BLOCK_SECONDS

    def value_of(self, op: Outpoint) -> int:
        return self.by_txid[op[0]].outputs[op[1]].value

    def emit(self, inputs: list[Outpoint], outputs: list[TxOutput], label: str = BACKGROUND, pool: int | None = None) -> Transaction:
        self._n_tx += 1
        txid = self._hash("tx", self._n_tx)
        tx = Transaction(
            txid, self.height, self.time,
            tuple(TxInput(t, v) for t, v in inputs), tuple(outputs),
        )
        if any(o.value <= 0 for o in outputs):
            raise AssertionError(f"generator produced a non-positive output in {txid}")
        if all(op[0] in self.by_txid for op in inputs) and sum(self.value_of(op) for op in inputs) < tx.output_sum:
            raise AssertionError(f"generator produced negative fee in {txid}")
        self.txs.append(tx)
        self.by_txid[txid] = tx
        self.labels[txid] = (label, pool)
        return tx

    def _random_value(self, lo: int, hi: int) -> int:
        """Random amount with a random number of significant decimals."""
        v = self.rng.randint(lo, hi)
        places = self.rng.randint(1, 8)
        step = 10 ** (8 - places)
        return max(lo, v - v % step) if v - v % step > 0 else v

    def _faucet(self) -> None:
        prehistory = hashlib.sha256(f"{self.plan.seed}:prehistory".encode()).hexdigest()
        outs = []
        for e in range(self.plan.n_exchanges):
            label = f"exchange-{e}"
            self.hot_addr[label] = self.address()
            outs.append(TxOutput(1_000_000 * 100_000_000, self.hot_addr[label], P2WPKH))
        tx = self.emit([(prehistory, 0)], outs)
        for i, label in enumerate(self.hot_addr):
            self.hot[label] = ((tx.txid, i), outs[i].value)

    def _exchange(self) -> str:
        return self.rng.choice(sorted(self.hot))

    def _user_batch(self, min_value: int = 0) -> None:
        ex = self._exchange()
        (op, hot_value) = self.hot[ex]
        outs = []
        for i in range(100):
            v = self._random_value(100_000_000, 2_000_000_000)
            if i == 0:
                v = max(v, min_value)
            outs.append(TxOutput(v, self.address(), self.rng.choice((P2WPKH, P2WPKH) + OTHER_SCRIPTS)))
        change = hot_value - sum(o.value for o in outs) - 10_000
        outs.append(TxOutput(change, self.hot_addr[ex], P2WPKH))
        tx = self.emit([op], outs)
        self.hot[ex] = ((tx.txid, len(outs) - 1), change)
        self.users.extend(((tx.txid, i), o.value) for i, o in enumerate(outs[:-1]))

    def take_user(self, min_value: int) -> tuple[Outpoint, int]:
        for _ in range(4):
            if not self.users:
                break
            j = self.rng.randrange(len(self.users))
            if self.users[j][1] >= min_value:
                self.users[j], self.users[-1] = self.users[-1], self.users[j]
                return self.users.pop()
        self._user_batch(min_value)
        # the batch's first output is guaranteed large enough
        for j in range(len(self.users) - 100, len(self.users)):
            if self.users[j][1] >= min_value:
                self.users[j], self.users[-1] = self.users[-1], self.users[j]
                return self.users.pop()
        raise AssertionError("unreachable: batch lacks a large output")

    def fund(self, payments: list[tuple[str, int]], fee: int = 1_000) -> list[Outpoint]:
        """One payment from a single user UTXO to ``payments``; change goes back to the user pool."""
        total = sum(v for _, v in payments) + fee
        op, value = self.take_user(total)
        outs = [TxOutput(v, a, P2WPKH) for a, v in payments]
        change = value - total
        if change >= DUST:
            outs.append(TxOutput(change, self.address(), self.rng.choice((P2WPKH,) + OTHER_SCRIPTS)))
        tx = self.emit([op], outs)
        if change >= DUST:
            self.users.append(((tx.txid, len(outs) - 1), change))
        return [(tx.txid, i) for i in range(len(payments))]

    def fund_many(self, values: list[int], group: int | None = None) -> list[tuple[Outpoint, int]]:
        """Fund fresh p2wpkh addresses, 1-3 per funding transaction (or ``group``)."""
        out = []
        i = 0
        while i < len(values):
            k = group or self.rng.randint(1, 3)
            chunk = values[i:i + k]
            ops = self.fund([(self.address(), v) for v in chunk])
            out.extend(zip(ops, chunk))
            i += k
        return out

    # ------------------------------------------------------------ Wasabi

    def wasabi_round(
        self,
        near_miss: str | None = None,
        standalone: bool = False,
        star: int = 0,
        collector: int = 0,
    ) -> Transaction:
        plan, rng, cfg = self.plan, self.rng, self.wcdh
        lo, hi = plan.wasabi_outputs
        m = rng.randint(lo, hi)
        if star:
            m = max(star, cfg.min_equal_outputs)
        if collector:
            m = max(m, collector)
        if near_miss == "equal_outputs":
            m = cfg.min_equal_outputs - 1
        if near_miss == "inputs":
            m = max(m, cfg.min_equal_outputs + 1)

        spread = cfg.mode_tolerance * 3 // 4
        denom = cfg.mode_center + rng.randint(-spread, spread)
        if near_miss == "band":
            off = cfg.mode_tolerance + 1 + rng.randint(0, cfg.mode_tolerance)
            denom = cfg.mode_center + off if rng.random() < 0.5 else cfg.mode_center - off
        share = denom // 1000
        per_input_fee = 1_500
        allow_remix = near_miss is None and not standalone
        fresh_only = near_miss is not None or star

        # participants: (remix inputs, fresh input values, n mix outputs, change)
        n_participants = m - 1 if near_miss == "inputs" else m
        participants = []
        remix_used = 0
        for p in range(n_participants):
            n_mix = 2 if near_miss == "inputs" and p == 0 else 1
            needed = n_mix * (denom + share)
            if near_miss == "inputs" or star or near_miss == "unique_values":
                slots = 1
            else:
                slots = rng.choices((1, 2, 3), weights=(6, 3, 1))[0]
            remix = []
            force_remix = allow_remix and p == 1 and remix_used == 0
            for _ in range(slots):
                if allow_remix and self.wasabi_pool and (force_remix or rng.random() < plan.wasabi_remix_prob):
                    j = rng.randrange(len(self.wasabi_pool))
                    self.wasabi_pool[j], self.wasabi_pool[-1] = self.wasabi_pool[-1], self.wasabi_pool[j]
                    remix.append(self.wasabi_pool.pop())
                    force_remix = False
            remix_used += len(remix)
            n_in = max(slots, len(remix))
            needed += per_input_fee * n_in
            have = sum(v for _, v in remix)
            if near_miss == "unique_values":
                change_target = 0
            elif p == 0:
                change_target = rng.randint(1_000_000, 30_000_000)
            else:
                change_target = rng.choice((0, rng.randint(DUST, 30_000_000)))
            fresh = []
            if have < needed + change_target or star:
                gap = max(needed + change_target - have, DUST)
                n_fresh = max(1, slots - len(remix)) if not fresh_only else 1
                for k in range(n_fresh):
                    part = gap // n_fresh + (gap % n_fresh if k == 0 else 0)
                    fresh.append(part)
            participants.append({"remix": remix, "fresh": fresh, "n_mix": n_mix})

        # fund fresh inputs (the star case funds all of them from one transaction)
        fresh_values = [v for p in participants for v in p["fresh"]]
        if star:
            funded = self.fund_many(fresh_values, group=len(fresh_values))
            self.truth["star"].append({"funding_txid": funded[0][0][0], "k": len(funded)})
        else:
            funded = self.fund_many(fresh_values)
        it = iter(funded)
        for p in participants:
            p["fresh_ops"] = [next(it) for _ in p["fresh"]]

        inputs: list[tuple[Outpoint, int]] = []
        outputs: list[TxOutput] = []
        unique_vals = {denom}
        changes = []
        for p in participants:
            ins = p["remix"] + p["fresh_ops"]
            inputs.extend(ins)
            in_sum = sum(v for _, v in ins)
            needed = p["n_mix"] * (denom + share) + per_input_fee * len(ins)
            outputs.extend(TxOutput(denom, self.address(), P2WPKH) for _ in range(p["n_mix"]))
            change = in_sum - needed
            if change >= DUST and near_miss != "unique_values":
                while change in unique_vals:
                    change -= 1
                unique_vals.add(change)
                changes.append(change)
        coord = share * sum(p["n_mix"] for p in participants)
        while coord in unique_vals:
            coord -= 1
        static = near_miss is None and rng.random() < plan.wasabi_static_fraction
        coord_addr = rng.choice(plan.coordinator_addresses) if static else self.address()
        outputs.append(TxOutput(coord, coord_addr, P2WPKH))
        outputs.extend(TxOutput(c, self.address(), P2WPKH) for c in changes)
        rng.shuffle(outputs)
        rng.shuffle(inputs)

        label = WASABI if near_miss is None else BACKGROUND
        tx = self.emit([op for op, _ in inputs], outputs, label)
        if near_miss is not None:
            self.truth["wasabi_near_miss"][tx.txid] = near_miss
            return tx
        if static:
            self.truth["wasabi_static"].append(tx.txid)
        if remix_used == 0:
            self.truth["wasabi_remixless"].append(tx.txid)

        led = self.truth["ledger"][WASABI]
        remix_in = sum(v for p in participants for _, v in p["remix"])
        fresh_in = sum(v for p in participants for _, v in p["fresh_ops"])
        led["remix_in"] += remix_in
        led["fresh_in"] += fresh_in
        led["fees"] += remix_in + fresh_in - tx.output_sum
        led["balance"] += fresh_in - (remix_in + fresh_in - tx.output_sum)
        for i, o in enumerate(tx.outputs):
            self.wasabi_pool.append(((tx.txid, i), o.value))
        return tx

    # ------------------------------------------------------------ Whirlpool

    def tx0(self, denom: int) -> None:
        lo, hi = self.plan.tx0_outputs
        k = self.rng.randint(lo, hi)
        premix = denom + self.rng.randint(max(1, self.plan.premix_tolerance // 10), self.plan.premix_tolerance)
        fee_out = max(DUST, denom // 20)
        total = k * premix + fee_out + 2_000
        op, value = self.take_user(total + DUST)
        outs = [TxOutput(premix, self.address(), P2WPKH) for _ in range(k)]
        outs.append(TxOutput(fee_out, self.address(), P2WPKH))
        change = value - total
        outs.append(TxOutput(change, self.address(), P2WPKH))
        tx = self.emit([op], outs, TX0, denom)
        self.premix[denom].extend(((tx.txid, i), premix) for i in range(k))
        self.users.append(((tx.txid, k + 1), change))

    def take_premix(self, denom: int) -> tuple[Outpoint, int]:
        if not self.premix[denom]:
            self.tx0(denom)
        return self.premix[denom].pop(0)

    def whirlpool_mix(self, denom: int, genesis: bool = False) -> Transaction:
        pool = self.wp_pool[denom]
        if genesis:
            n_remix = 0
        else:
            if not pool:
                raise AssertionError(f"pool {denom} has no outputs to remix")
            n_remix = self.rng.randint(1, min(4, len(pool)))
        remix = []
        for _ in range(n_remix):
            j = self.rng.randrange(len(pool))
            pool[j], pool[-1] = pool[-1], pool[j]
            remix.append(pool.pop())
        premix = [self.take_premix(denom) for _ in range(5 - n_remix)]
        ins = remix + premix
        self.rng.shuffle(ins)
        outs = [TxOutput(denom, self.address(), P2WPKH) for _ in range(5)]
        tx = self.emit([op for op, _ in ins], outs, WHIRLPOOL, denom)
        if genesis:
            self.truth["genesis"][denom].append(tx.txid)
        pool.extend(((tx.txid, i), denom) for i in range(5))

        led = self.truth["ledger"][WHIRLPOOL]
        fresh_in = sum(v for _, v in premix)
        remix_in = sum(v for _, v in remix)
        fees = fresh_in + remix_in - tx.output_sum
        led["remix_in"] += remix_in
        led["fresh_in"] += fresh_in
        led["fees"] += fees
        led["balance"] += fresh_in - fees
        return tx

    def whirlpool_decoy(self, denom: int) -> Transaction:
        """Mix-shaped, no remix input, premix inputs above the genesis band."""
        values = [denom + self.plan.premix_tolerance + self.rng.randint(1, 50_000) for _ in range(5)]
        funded = self.fund_many(values)
        outs = [TxOutput(denom, self.address(), P2WPKH) for _ in range(5)]
        tx = self.emit([op for op, _ in funded], outs)
        self.truth["whirlpool_decoys"].append(tx.txid)
        return tx

    def whirlpool_near_miss(self, denom: int, variant: str) -> Transaction | None:
        """One real pool output plus fresh inputs, violating exactly one shape clause."""
        pool = self.wp_pool[denom]
        if len(pool) <= 5:
            return None
        j = self.rng.randrange(len(pool))
        pool[j], pool[-1] = pool[-1], pool[j]
        remix_op, remix_val = pool.pop()
        n_in = 4 if variant == "inputs" else 5
        n_out = 4 if variant == "outputs" else 5
        need = n_out * denom + 2_000 - remix_val
        each = -(-need // (n_in - 1))
        fresh = self.fund_many([each + self.rng.randint(10_000, 100_000) for _ in range(n_in - 1)])
        outs = [TxOutput(denom, self.address(), P2WPKH) for _ in range(n_out)]
        if variant == "value":
            outs[0] = TxOutput(denom + 1, outs[0].address, P2WPKH)
        ins = [remix_op] + [op for op, _ in fresh]
        tx = self.emit(ins, outs)
        self.truth["whirlpool_near_miss"][tx.txid] = variant
        self._record_exit(WHIRLPOOL, remix_val)
        return tx

    # ------------------------------------------------------------ exits

    def _record_exit(self, protocol: str, value: int) -> None:
        led = self.truth["ledger"][protocol]
        led["exits"] += value
        led["balance"] -= value

    def _pop_cj_output(self) -> tuple[str, Outpoint, int] | None:
        sizes = [(WASABI, None, len(self.wasabi_pool))]
        sizes += [(WHIRLPOOL, d, max(0, len(p) - 5)) for d, p in sorted(self.wp_pool.items())]
        total = sum(n for *_, n in sizes)
        if total == 0:
            return None
        r = self.rng.randrange(total)
        for proto, denom, n in sizes:
            if r < n:
                pool = self.wasabi_pool if proto == WASABI else self.wp_pool[denom]
                j = self.rng.randrange(len(pool))
                pool[j], pool[-1] = pool[-1], pool[j]
                op, v = pool.pop()
                return proto, op, v
            r -= n
        return None

    def exit_spend(self) -> None:
        picked = self._pop_cj_output()
        if picked is None:
            return
        proto, op, value = picked
        fee = 500
        pay = value - fee
        outs = []
        if pay > 2 * DUST and self.rng.random() < 0.5:
            part = self.rng.randint(DUST, pay - DUST)
            outs = [TxOutput(part, self.address(), self.rng.choice((P2WPKH,) + OTHER_SCRIPTS)),
                    TxOutput(pay - part, self.address(), P2WPKH)]
        else:
            outs = [TxOutput(pay, self.address(), self.rng.choice((P2WPKH,) + OTHER_SCRIPTS))]
        self.emit([op], outs)
        self._record_exit(proto, value)

    def _deposit(self, exchange: str, op: Outpoint, value: int) -> None:
        """Pay ``op`` to a fresh deposit address, then sweep it into the hot wallet."""
        deposit = self.address()
        tx = self.emit([op], [TxOutput(value - 500, deposit, P2WPKH)])
        hot_op, hot_val = self.hot[exchange]
        sweep = self.emit([(tx.txid, 0), hot_op], [TxOutput(hot_val + value - 1_500, self.hot_addr[exchange], P2WPKH)])
        self.hot[exchange] = ((sweep.txid, 0), hot_val + value - 1_500)

    def plant_exchange(self, protocol: str, tx: Transaction, kind: str) -> None:
        eligible = [i for i, o in enumerate(tx.outputs) if Counter(x.value for x in tx.outputs)[o.value] >= 3]
        vout = eligible[0]
        pool = self.wasabi_pool if protocol == WASABI else self.wp_pool[tx.outputs[vout].value]
        pool.remove(((tx.txid, vout), tx.outputs[vout].value))
        value = tx.outputs[vout].value
        exchange = self._exchange()
        if kind == "direct":
            self._deposit(exchange, (tx.txid, vout), value)
        else:
            hop = self.emit([(tx.txid, vout)], [TxOutput(value - 500, self.address(), P2WPKH)])
            self._deposit(exchange, (hop.txid, 0), value - 500)
        self._record_exit(protocol, value)
        self.truth["exchange_flows"][protocol][kind].append({"txid": tx.txid, "vout": vout, "value": value})

    def plant_collector(self, tx: Transaction, k: int) -> None:
        counts = Counter(o.value for o in tx.outputs)
        vouts = [i for i, o in enumerate(tx.outputs) if counts[o.value] >= 3][:k]
        for v in vouts:
            self.wasabi_pool.remove(((tx.txid, v), tx.outputs[v].value))
        total = sum(tx.outputs[v].value for v in vouts)
        self.emit([(tx.txid, v) for v in vouts], [TxOutput(total - 2_000, self.address(), P2WPKH)])
        for v in vouts:
            self._record_exit(WASABI, tx.outputs[v].value)
        self.truth["collector"].append({"txid": tx.txid, "k": len(vouts)})

    # ------------------------------------------------------------ background

    def background_payment(self) -> Transaction:
        n_in = self.rng.choices((1, 2, 3), weights=(6, 3, 1))[0]
        ins = [self.take_user(20_000 + 3 * DUST) for _ in range(n_in)]
        total = sum(v for _, v in ins)
        fee = 1_000 * n_in
        pay = min(self._random_value(10_000, 500_000_000), total - fee - DUST)
        outs = [TxOutput(pay, self.address(), self.rng.choice((P2WPKH,) + OTHER_SCRIPTS))]
        change = total - fee - pay
        has_change = change >= DUST and self.rng.random() < 0.85
        if has_change:
            outs.append(TxOutput(change, self.address(), self.rng.choice((P2WPKH,) + OTHER_SCRIPTS)))
        else:
            outs[0] = TxOutput(total - fee, outs[0].address, outs[0].script)
        tx = self.emit([op for op, _ in ins], outs)
        if has_change:
            self.users.append(((tx.txid, 1), change))
        return tx

    # ------------------------------------------------------------ schedule

    def advance(self, blocks: int) -> None:
        self.height += blocks

    def snapshot_alpha(self) -> None:
        month = datetime.fromtimestamp(self.time, timezone.utc).strftime("%Y-%m")
        for proto in (WASABI, WHIRLPOOL):
            self.truth["alpha"][proto][month] = self.truth["ledger"][proto]["balance"]


def _spread(n_slots: int, n_items: int, skip: int = 0) -> list[int]:
    """Evenly spaced slot indices (>= skip) for ``n_items`` items."""
    free = n_slots - skip
    if n_items == 0 or free <= 0:
        return []
    return [skip + (i * free) // n_items for i in range(n_items)]


def generate(plan: ScenarioPlan, wcdh: WcdhConfig = WcdhConfig()) -> SyntheticCorpus:
    b = ChainBuilder(plan, wcdh)
    rng = b.rng

    events: list[tuple] = [("wasabi", i) for i in range(plan.n_wasabi)]
    events += [("wasabi_near", NEAR_MISS_WASABI[i % 4]) for i in range(plan.wasabi_near_miss)]
    for denom, n in sorted(plan.whirlpool_mixes.items()):
        events += [("whirlpool", denom)] * n
    pools = sorted(d for d, n in plan.whirlpool_mixes.items() if n)
    events += [("decoy", pools[i % len(pools)]) for i in range(plan.whirlpool_decoys)] if pools else []
    events += [("wp_near", pools[i % len(pools)], NEAR_MISS_WHIRLPOOL[i % 3]) for i in range(plan.whirlpool_near_miss)] if pools else []
    events += [("background",)] * plan.n_background
    rng.shuffle(events)
    # the first Wasabi round and each pool's genesis mixes open the schedule
    wasabi_pos = [i for i, e in enumerate(events) if e[0] == "wasabi"]
    for rank, pos in enumerate(wasabi_pos):
        events[pos] = ("wasabi", rank)

    n_w = plan.n_wasabi
    standalone = {0} | set(_spread(n_w, plan.wasabi_standalone - 1, skip=1))
    plant_slots = list(range(n_w))
    wasabi_plants: list[tuple] = [("star", k) for k in plan.star_plants]
    wasabi_plants += [("collector", k) for k in plan.collector_plants]
    d_w, i_w = plan.exchange_plants.get(WASABI, (0, 0))
    wasabi_plants += [("exchange", "direct")] * d_w + [("exchange", "indirect")] * i_w
    plant_at = {plant_slots[j]: wasabi_plants[i] for i, j in enumerate(_spread(len(plant_slots), len(wasabi_plants)))}

    n_wp = sum(plan.whirlpool_mixes.values())
    d_s, i_s = plan.exchange_plants.get(WHIRLPOOL, (0, 0))
    wp_plants = [("exchange", "direct")] * d_s + [("exchange", "indirect")] * i_s
    wp_plant_at = {j: wp_plants[i] for i, j in enumerate(_spread(n_wp, len(wp_plants), skip=min(n_wp, 1)))}

    gap = max(1, plan.span_days * BLOCKS_PER_DAY // max(1, len(events)))
    made = Counter()
    wp_rank = 0
    carry = 0.0
    for event in events:
        kind = event[0]
        if kind == "wasabi":
            rank = event[1]
            plant = plant_at.get(rank)
            tx = b.wasabi_round(
                standalone=rank in standalone,
                star=plant[1] if plant and plant[0] == "star" else 0,
                collector=plant[1] if plant and plant[0] == "collector" else 0,
            )
            if plant and plant[0] == "collector":
                b.plant_collector(tx, plant[1])
            elif plant and plant[0] == "exchange":
                b.plant_exchange(WASABI, tx, plant[1])
        elif kind == "wasabi_near":
            b.wasabi_round(near_miss=event[1])
        elif kind == "whirlpool":
            denom = event[1]
            made[denom] += 1
            tx = b.whirlpool_mix(denom, genesis=made[denom] <= plan.whirlpool_genesis.get(denom, 1))
            plant = wp_plant_at.get(wp_rank)
            wp_rank += 1
            if plant:
                b.plant_exchange(WHIRLPOOL, tx, plant[1])
        elif kind == "decoy":
            b.whirlpool_decoy(event[1])
        elif kind == "wp_near":
            b.whirlpool_near_miss(event[1], event[2])
        else:
            b.background_payment()

        carry += plan.exits_per_event
        while carry >= 1.0:
            carry -= 1.0
            b.exit_spend()
        b.snapshot_alpha()
        b.advance(gap)

    truth = b.truth
    truth["genesis"] = {str(d): v for d, v in truth["genesis"].items()}
    truth["ledger"] = {p: dict(c) for p, c in truth["ledger"].items()}
    truth["unspent"] = {
        WASABI: sum(v for _, v in b.wasabi_pool),
        WHIRLPOOL: sum(v for p in b.wp_pool.values() for _, v in p),
    }
    tags = [("address", addr, label, "exchange") for label, addr in sorted(b.hot_addr.items())]
    return SyntheticCorpus(plan, b.txs, b.labels, truth, tags)


def gen_wasabi_tx(builder: ChainBuilder, near_miss: str | None = None) -> Transaction:
    """One Wasabi-model round on top of ``builder``'s UTXO state."""
    return builder.wasabi_round(near_miss=near_miss)


def gen_whirlpool_chain(plan: ScenarioPlan, denom: int, builder: ChainBuilder | None = None) -> list[Transaction]:
    """Genesis mixes followed by remixing mixes for one pool (Tx0s emitted as needed)."""
    b = builder or ChainBuilder(plan)
    start = len(b.txs)
    n = plan.whirlpool_mixes.get(denom, 0)
    g = plan.whirlpool_genesis.get(denom, 1)
    for i in range(n):
        b.whirlpool_mix(denom, genesis=i < g)
    return b.txs[start:]


def gen_background(plan: ScenarioPlan, builder: ChainBuilder | None = None) -> list[Transaction]:
    b = builder or ChainBuilder(plan)
    start = len(b.txs)
    for _ in range(plan.n_background):
        b.background_payment()
    return b.txs[start:]


def star_scenario(k: int = 20, seed: int = 0) -> ScenarioPlan:
    """A single remix-less Wasabi round whose k inputs are all funded by one entity."""
    return ScenarioPlan(
        seed=seed, n_wasabi=1, wasabi_standalone=1, star_plants=(k,),
        whirlpool_mixes={}, whirlpool_genesis={}, n_background=5, exits_per_event=0,
        wasabi_static_fraction=0.0,
    )


def collector_scenario(k: int = 20, seed: int = 0) -> ScenarioPlan:
    """Two Wasabi rounds; the second's k mixed outputs are swept into one address."""
    return ScenarioPlan(
        seed=seed, n_wasabi=2, wasabi_standalone=1, wasabi_outputs=(k, k), collector_plants=(k,),
        whirlpool_mixes={}, whirlpool_genesis={}, n_background=5, exits_per_event=0,
        wasabi_static_fraction=0.0,
    )
