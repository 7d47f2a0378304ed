import hashlib

import pytest

from mixscan.chain import Transaction, TxInput, TxOutput, build_chain_store
from mixscan.detect import detect_all
from mixscan.synth import ScenarioPlan, generate

T0 = 1_546_300_800  # 2019-01-01


def txid(name: str) -> str:
    return hashlib.sha256(name.encode()).hexdigest()


def make_tx(name, inputs=(), outputs=(), height=1, time=None):
    """Hand-built transaction. ``inputs`` are (parent name, vout); outputs (value, address[, script])."""
    ins = tuple(TxInput(txid(p), v) for p, v in inputs) or (TxInput(txid("coinbase:" + name), 0),)
    outs = tuple(TxOutput(*o) for o in outputs)
    return Transaction(txid(name), height, T0 + height * 600 if time is None else time, ins, outs)


class Chain:
    """Accumulates hand-built transactions with increasing heights."""

    def __init__(self):
        self.txs = []
        self.height = 0

    def add(self, name, inputs=(), outputs=(), same_block=False, time=None):
        if not same_block:
            self.height += 1
        tx = make_tx(name, inputs, outputs, self.height, time)
        self.txs.append(tx)
        return tx

    def store(self):
        return build_chain_store(self.txs)


@pytest.fixture
def chain():
    return Chain()


@pytest.fixture(scope="session")
def small_corpus():
    plan = ScenarioPlan(
        seed=11, n_wasabi=30, wasabi_near_miss=8, wasabi_standalone=2,
        whirlpool_mixes={d: 12 for d in (100_000, 1_000_000, 5_000_000, 50_000_000)},
        whirlpool_genesis={100_000: 1, 1_000_000: 2, 5_000_000: 1, 50_000_000: 1},
        whirlpool_decoys=4, whirlpool_near_miss=6, n_background=60,
        exchange_plants={"wasabi": (2, 1), "whirlpool": (1, 1)},
        span_days=90,
    )
    corpus = generate(plan)
    store = build_chain_store(corpus.transactions)
    ds = detect_all(store, plan.coordinator_addresses)
    return corpus, store, ds
