"""Wash-trade flagging, per-collection wash volume, and the aggregate
first-digit and tail-exponent diagnostics.

Four transaction-level filters mark suspicious trades:
  self_trade     buyer and seller are the same wallet
  inverted_pair  trades of one token exist in both directions between a
                 wallet pair; every trade between the pair on that token is
                 flagged once both directions exist
  repeat_buyer   a wallet bought the same token three or more times; all of
                 that wallet's trades of the token are flagged
  common_funder  buyer and seller share a first funder (unless that funder
                 is an excluded exchange or mixer address), or one party
                 first-funded the other

All four are monotone in the trade set: adding trades can only add flags.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np
from scipy import stats as sstats

from .ingest import CategoryMap, FundingIndex, Transfer, TransferLog

FILTERS = ("self_trade", "inverted_pair", "repeat_buyer", "common_funder")


@dataclass(frozen=True)
class WashFlag:
    tx_id: str
    token: str
    filter: str
    volume_eth: float


class WashFlagSet:
    """Flag reasons per trade, deduplicated on (tx_id, token)."""

    def __init__(self) -> None:
        self._by_trade: dict[tuple[str, str], dict] = {}
        self.missing_funding: int = 0

    def add(self, trade: Transfer, reason: str) -> None:
        key = (trade.tx_id, trade.token)
        entry = self._by_trade.get(key)
        if entry is None:
            entry = {
                "reasons": set(),
                "volume_eth": trade.price_eth,
                "collection": trade.collection,
                "timestamp": trade.timestamp,
            }
            self._by_trade[key] = entry
        entry["reasons"].add(reason)

    def __len__(self) -> int:
        return len(self._by_trade)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._by_trade

    def reasons(self, tx_id: str, token: str) -> frozenset[str]:
        entry = self._by_trade.get((tx_id, token))
        return frozenset(entry["reasons"]) if entry else frozenset()

    def flagged_keys(self) -> set[tuple[str, str]]:
        return set(self._by_trade)

    def flags(self) -> list[WashFlag]:
        """One row per (trade, reason), ordered by (tx_id, filter)."""
        out = []
        for (tx_id, token), entry in self._by_trade.items():
            for reason in entry["reasons"]:
                out.append(WashFlag(tx_id, token, reason, entry["volume_eth"]))
        out.sort(key=lambda f: (f.tx_id, f.filter, f.token))
        return out

    def volume_before(self, collection: str, cutoff_ts: int) -> float:
        """Total flagged ETH volume of a collection strictly before cutoff_ts,
        each trade counted once however many filters hit it."""
        return sum(
            e["volume_eth"]
            for e in self._by_trade.values()
            if e["collection"] == collection and e["timestamp"] < cutoff_ts
        )


def flag_wash_trades(
    log: TransferLog,
    funding: Optional[FundingIndex] = None,
    exclusions: Optional[set[str]] = None,
) -> WashFlagSet:
    """Apply the four filters to all trades in the log.

    Filter common_funder is skipped (and counted in missing_funding) for a
    trade whenever the funding data required by all three of its clauses is
    absent.
    """
    exclusions = exclusions or set()
    flags = WashFlagSet()
    trades = [t for t in log if t.is_trade]

    # (i) identical buyer and seller
    for t in trades:
        if t.from_wallet == t.to_wallet:
            flags.add(t, "self_trade")

    # (ii) inverted pair per token: index directed wallet pairs
    directed: dict[tuple[str, str, str, str], list[Transfer]] = {}
    for t in trades:
        if t.from_wallet != t.to_wallet:
            directed.setdefault((t.collection, t.token, t.from_wallet, t.to_wallet), []).append(t)
    for (coll, token, a, b), ts in directed.items():
        if (coll, token, b, a) in directed:
            for t in ts:
                flags.add(t, "inverted_pair")

    # (iii) three or more buys of one token by one wallet
    buy_counts: dict[tuple[str, str, str], int] = {}
    for t in trades:
        key = (t.collection, t.token, t.to_wallet)
        buy_counts[key] = buy_counts.get(key, 0) + 1
    repeat = {k for k, c in buy_counts.items() if c >= 3}
    if repeat:
        for t in trades:
            if (t.collection, t.token, t.to_wallet) in repeat or (t.collection, t.token, t.from_wallet) in repeat:
                flags.add(t, "repeat_buyer")

    # (iv) funding relations
    if funding is not None:
        for t in trades:
            fb = funding.first_funder(t.to_wallet)
            fs = funding.first_funder(t.from_wallet)
            hit = False
            if fb is not None and fs is not None and fb == fs and fb not in exclusions:
                hit = True
            if fb is not None and fb == t.from_wallet:
                hit = True
            if fs is not None and fs == t.to_wallet:
                hit = True
            if hit:
                flags.add(t, "common_funder")
            elif fb is None or fs is None:
                flags.missing_funding += 1
    return flags


def wash_volume_before(collection: str, t0_hour: int, flags: WashFlagSet) -> float:
    """ln(1 + flagged ETH volume of the collection before the start of hour t0)."""
    return math.log1p(flags.volume_before(collection, t0_hour * 3600))


@dataclass
class BenfordResult:
    observed: np.ndarray  # 9 digit frequencies, sums to 1
    expected: np.ndarray  # Benford frequencies, sums to 1
    chi2: float
    p_value: float
    n: int
    skipped: int = 0


def benford_expected() -> np.ndarray:
    """First-digit probabilities log10(1 + 1/N) for N in 1..9."""
    return np.log10(1.0 + 1.0 / np.arange(1, 10))


def leading_digit(x: float) -> int:
    """First significant decimal digit of a positive magnitude (0.042 -> 4)."""
    m = abs(x)
    if m <= 0 or not math.isfinite(m):
        raise ValueError("leading digit needs a positive finite value")
    while m < 1.0:
        m *= 10.0
    while m >= 10.0:
        m /= 10.0
    return int(m)


def benford_test(prices: Iterable[float]) -> BenfordResult:
    """Chi-square goodness of fit of leading price digits against Benford."""
    counts = np.zeros(9)
    skipped = 0
    n = 0
    for p in prices:
        if p is None or not math.isfinite(p) or p <= 0:
            skipped += 1
            continue
        counts[leading_digit(p) - 1] += 1
        n += 1
    if n == 0:
        raise ValueError("benford test requires at least one positive price")
    observed = counts / n
    expected = benford_expected()
    chi2 = float(n * np.sum((observed - expected) ** 2 / expected))
    p_value = float(sstats.chi2.sf(chi2, df=8))
    return BenfordResult(observed, expected, chi2, p_value, n, skipped)


def powerlaw_exponent(prices: Iterable[float], tail_fraction: float = 0.10) -> float:
    """Hill-type maximum-likelihood density-exponent estimate on the upper tail.

    With the tail points x_1..x_k above (and including) the tail cutoff
    x_min, the estimate is 1 + k / sum(ln(x_i / x_min)).  The value is the
    exponent of the density, one larger than the survival-function exponent.
    """
    if not 0 < tail_fraction <= 1.0:
        raise ValueError("tail_fraction must lie in (0, 1]")
    x = np.asarray([p for p in prices if p is not None and p > 0], dtype=float)
    x.sort()
    n = len(x)
    k = int(math.floor(n * tail_fraction)) if tail_fraction < 1.0 else n
    if k < 100:
        raise ValueError(f"need at least 100 tail observations, got {k}")
    tail = x[n - k :]
    x_min = tail[0]
    s = float(np.sum(np.log(tail / x_min)))
    if s <= 0:
        raise ValueError("degenerate tail: all tail observations equal")
    return 1.0 + k / s


def flags_to_csv_lines(flags: WashFlagSet) -> Iterator[str]:
    yield "tx_id,token,filter,volume_eth"
    for f in flags.flags():
        yield f"{f.tx_id},{f.token},{f.filter},{repr(f.volume_eth)}"
