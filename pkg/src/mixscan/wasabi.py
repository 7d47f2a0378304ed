"""Wasabi CoinJoin detection: coordinator-address and threshold heuristics,
plus the per-transaction feature extractor used by the forest classifier."""
from __future__ import annotations

from collections import Counter
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .chain import SATS_PER_BTC, ChainStore, Transaction

if TYPE_CHECKING:
    from .entities import EntityMap

FEATURE_NAMES = (
    "num_uniq_output_val",
    "ratio_num_input_num_output",
    "min_output_val",
    "rng_output_val",
    "mean_dec_places",
    "num_input_reuse",
    "mean_output_cluster_size",
    "is_native_segwit",
)

STATIC_MIN_EQUAL = 3


@dataclass(frozen=True)
class WcdhConfig:
    min_equal_outputs: int = 10
    mode_center: int = 10_000_000
    mode_tolerance: int = 2_000_000
    min_unique_values: int = 2

    def __post_init__(self):
        if self.min_equal_outputs < 1 or self.min_unique_values < 1:
            raise ValueError("WCDH counts must be >= 1")
        if not 0 <= self.mode_tolerance < self.mode_center:
            raise ValueError("mode_tolerance must be smaller than mode_center")


def load_coordinator_addresses(path: str | Path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.strip() for line in fh if line.strip() and not line.startswith("#"))


def detect_wasabi_static(tx: Transaction, coordinator_addrs: Iterable[str]) -> bool:
    coordinators = coordinator_addrs if isinstance(coordinator_addrs, (set, frozenset)) else set(coordinator_addrs)
    if not any(o.address in coordinators for o in tx.outputs):
        return False
    counts = Counter(o.value for o in tx.outputs)
    return max(counts.values()) >= STATIC_MIN_EQUAL


def detect_wasabi_wcdh(tx: Transaction, cfg: WcdhConfig = WcdhConfig()) -> bool:
    counts = Counter(o.value for o in tx.outputs)
    top = max(counts.values())
    if top < cfg.min_equal_outputs or len(tx.inputs) < top:
        return False
    if sum(1 for c in counts.values() if c == 1) < cfg.min_unique_values:
        return False
    # several values may tie for the mode; any one inside the band qualifies
    return any(
        abs(value - cfg.mode_center) <= cfg.mode_tolerance
        for value, c in counts.items()
        if c == top
    )


def wcdh_clauses(tx: Transaction, cfg: WcdhConfig = WcdhConfig()) -> dict[str, bool]:
    """Per-clause breakdown for diagnostics; clause 'band' uses the best tied mode."""
    counts = Counter(o.value for o in tx.outputs)
    top = max(counts.values())
    return {
        "equal_outputs": top >= cfg.min_equal_outputs,
        "band": any(abs(v - cfg.mode_center) <= cfg.mode_tolerance for v, c in counts.items() if c == top),
        "unique_values": sum(1 for c in counts.values() if c == 1) >= cfg.min_unique_values,
        "inputs": len(tx.inputs) >= top,
    }


def decimal_places(sats: int) -> int:
    """Significant fractional digits of a satoshi amount written in BTC."""
    frac = sats % SATS_PER_BTC
    if frac == 0:
        return 0
    digits = f"{frac:08d}".rstrip("0")
    return len(digits)


@dataclass(frozen=True)
class FeatureVector:
    num_uniq_output_val: int
    ratio_num_input_num_output: float
    min_output_val: int
    rng_output_val: int
    mean_dec_places: float
    num_input_reuse: int
    mean_output_cluster_size: float
    is_native_segwit: bool

    def as_array(self) -> np.ndarray:
        return np.asarray(astuple(self), dtype=np.float64)


def extract_features(tx: Transaction, store: ChainStore, entities: EntityMap) -> FeatureVector:
    # inputs outside the feed contribute no address and are not counted as p2wpkh
    prevouts = [store.resolve(i) for i in tx.inputs if store.has_output(i.prev_txid, i.prev_vout)]
    values = [o.value for o in tx.outputs]
    input_addrs = {p.address for p in prevouts}
    output_addrs = {o.address for o in tx.outputs}
    return FeatureVector(
        num_uniq_output_val=len(set(values)),
        ratio_num_input_num_output=len(tx.inputs) / len(tx.outputs),
        min_output_val=min(values),
        rng_output_val=max(values) - min(values),
        mean_dec_places=sum(decimal_places(v) for v in values) / len(values),
        num_input_reuse=len(input_addrs & output_addrs),
        mean_output_cluster_size=sum(entities.cluster_size(o.address) for o in tx.outputs) / len(tx.outputs),
        is_native_segwit=len(prevouts) == len(tx.inputs)
        and all(p.is_p2wpkh for p in prevouts)
        and all(o.is_p2wpkh for o in tx.outputs),
    )


def feature_matrix(txs: Iterable[Transaction], store: ChainStore, entities: EntityMap) -> np.ndarray:
    rows = [extract_features(tx, store, entities).as_array() for tx in txs]
    if not rows:
        return np.empty((0, len(FEATURE_NAMES)))
    return np.vstack(rows)
