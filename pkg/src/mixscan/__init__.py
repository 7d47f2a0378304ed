"""CoinJoin detection, entity clustering and mixing metrics for Bitcoin-style feeds."""

__version__ = "0.1.0"
