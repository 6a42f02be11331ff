"""Agent-level analytics: per-wallet event profits, sophistication flags,
bubble-timing scores, the unique-owners series, and wallet enrichment from
generic chain transactions.

Profit accounting is a pure within-window measure over event time
[-24, 24]:  in-window buys enter at their trade price, positions held from
before the window enter at the carried price at t=-24 when sold, and
in-window buys still open at the end are marked at the carried price at
t=+24.
"""

from __future__ import annotations

import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np
from scipy import stats as sstats

from .econometrics import RegressionResult, ols
from .events import RunUpEvent
from .ingest import CategoryMap, TransferLog, WalletTx


@dataclass
class AgentEventRecord:
    wallet: str
    event: str                      # event id "collection@t0"
    collection: str
    t0: int
    profit_pct: float
    n_buys: int
    n_sells: int
    sophisticated: bool = False
    ts: Optional[float] = None
    ts_buy: Optional[float] = None
    ts_sell: Optional[float] = None
    ts_rank: Optional[float] = None
    ts_buy_rank: Optional[float] = None
    ts_sell_rank: Optional[float] = None


@dataclass(frozen=True)
class OwnershipPoint:
    collection: str
    hour: int
    unique_owners: int
    supply: int

    @property
    def fraction(self) -> float:
        return self.unique_owners / self.supply if self.supply > 0 else float("nan")


@dataclass
class WalletStats:
    wallet: str
    n_tx: int = 0
    total_value_eth: float = 0.0
    wallet_age_days: float = 0.0
    n_dex_swaps: int = 0
    n_dex_liquidity: int = 0
    n_lending_ops: int = 0
    n_trades: int = 0
    nft_volume: float = 0.0
    mean_holding_hours: Optional[float] = None
    hourly_profit_pct: Optional[float] = None


@dataclass(frozen=True)
class SophisticationParams:
    min_events: int = 5
    lookback: int = 5
    min_avg_profit: float = 0.25


def _window_trades(event: RunUpEvent, log: TransferLog) -> list:
    lo = (event.t0 - event.window) * 3600
    hi = (event.t0 + event.window + 1) * 3600
    return [
        t
        for t in log.by_collection().get(event.collection, [])
        if t.is_trade and lo <= t.timestamp < hi
    ]


def event_agent_profits(event: RunUpEvent, log: TransferLog) -> dict[str, AgentEventRecord]:
    """Per-wallet percentage profit over the event window.

    Wallets with zero invested capital (no buys and no basis-bearing sells)
    are excluded.  Sells are matched FIFO against the wallet's in-window
    buys of the same token; unmatched sells draw their basis from the
    carried price at t=-24.
    """
    p_start = event.price_at(-event.window)
    p_end = event.price_at(event.window)
    trades = _window_trades(event, log)

    cost: dict[str, float] = defaultdict(float)
    proceeds: dict[str, float] = defaultdict(float)
    n_buys: dict[str, int] = defaultdict(int)
    n_sells: dict[str, int] = defaultdict(int)
    open_lots: dict[tuple[str, str], deque] = defaultdict(deque)

    for t in trades:  # log order is chronological
        buyer, seller = t.to_wallet, t.from_wallet
        cost[buyer] += t.price_eth
        n_buys[buyer] += 1
        open_lots[(buyer, t.token)].append(t.price_eth)

        proceeds[seller] += t.price_eth
        n_sells[seller] += 1
        lots = open_lots.get((seller, t.token))
        if lots:
            lots.popleft()  # basis already in cost
        else:
            cost[seller] += p_start  # held from before the window

    for (wallet, _token), lots in open_lots.items():
        proceeds[wallet] += len(lots) * p_end  # mark open buys at t=+24

    out: dict[str, AgentEventRecord] = {}
    for wallet in sorted(set(cost) | set(proceeds)):
        c = cost[wallet]
        if c <= 0:
            continue
        out[wallet] = AgentEventRecord(
            wallet=wallet,
            event=event.event_id,
            collection=event.collection,
            t0=event.t0,
            profit_pct=(proceeds[wallet] - c) / c,
            n_buys=n_buys[wallet],
            n_sells=n_sells[wallet],
        )
    return out


def sophistication_flags(
    event_profits: list[tuple[RunUpEvent, dict[str, AgentEventRecord]]],
    params: SophisticationParams = SophisticationParams(),
) -> dict[tuple[str, str], bool]:
    """Strictly causal sophistication flags per (event_id, wallet).

    A wallet is sophisticated at event e iff it participated in at least
    min_events events anchored strictly before e's t0 and its mean profit
    over the most recent `lookback` of those exceeds min_avg_profit.
    Events sharing an anchor hour cannot see each other.
    """
    ordered = sorted(event_profits, key=lambda ep: (ep[0].t0, ep[0].collection))
    history: dict[str, list[float]] = defaultdict(list)
    flags: dict[tuple[str, str], bool] = {}

    i = 0
    while i < len(ordered):
        j = i
        while j < len(ordered) and ordered[j][0].t0 == ordered[i][0].t0:
            j += 1
        group = ordered[i:j]
        for ev, profits in group:
            for wallet, rec in profits.items():
                prior = history[wallet]
                soph = (
                    len(prior) >= params.min_events
                    and float(np.mean(prior[-params.lookback :])) > params.min_avg_profit
                )
                flags[(ev.event_id, wallet)] = soph
                rec.sophisticated = soph
        for ev, profits in group:  # append only after the whole hour is flagged
            for wallet, rec in profits.items():
                history[wallet].append(rec.profit_pct)
        i = j
    return flags


def sophisticated_fraction(
    event: RunUpEvent,
    log: TransferLog,
    flags: dict[tuple[str, str], bool],
) -> Optional[float]:
    """Share of flagged wallets among wallets actively trading in [-24, 0]."""
    lo = (event.t0 - event.window) * 3600
    hi = (event.t0 + 1) * 3600
    active: set[str] = set()
    for t in log.by_collection().get(event.collection, []):
        if t.is_trade and lo <= t.timestamp < hi:
            active.add(t.to_wallet)
            active.add(t.from_wallet)
    if not active:
        return None
    n_soph = sum(1 for w in active if flags.get((event.event_id, w), False))
    return n_soph / len(active)


@dataclass
class PersistenceResult:
    coefficient: float
    t_stat: float
    n_pairs: int
    low_power: bool
    regression: RegressionResult


def profit_persistence(records: list[AgentEventRecord], min_pairs: int = 30) -> PersistenceResult:
    """Pooled AR(1) of wallet profits across consecutive event participations."""
    by_wallet: dict[str, list[AgentEventRecord]] = defaultdict(list)
    for r in records:
        by_wallet[r.wallet].append(r)
    prev, cur = [], []
    for wallet in sorted(by_wallet):
        rs = sorted(by_wallet[wallet], key=lambda r: (r.t0, r.collection))
        for a, b in zip(rs, rs[1:]):
            prev.append(a.profit_pct)
            cur.append(b.profit_pct)
    n = len(prev)
    if n < 2:
        raise ValueError("profit persistence needs at least two participation pairs")
    X = np.column_stack([np.ones(n), np.array(prev)])
    res = ols(X, np.array(cur), names=["intercept", "lag_profit"])
    return PersistenceResult(
        coefficient=res.coef("lag_profit"),
        t_stat=res.tstat("lag_profit"),
        n_pairs=n,
        low_power=n < min_pairs,
        regression=res,
    )


def ts_buy(d: int) -> float:
    """Buy-leg timing score: -d - 12 at or before the peak, d - 12 after."""
    return float(-d - 12 if d <= 0 else d - 12)


def ts_sell(d: int) -> float:
    return -ts_buy(d)


def peak_hour(event: RunUpEvent) -> int:
    """Event time of the ex-post price maximum over t in [0, 24], earliest on ties."""
    w = event.window
    post = event.price[w:]
    return int(np.argmax(post))  # argmax returns the first maximal index


def timing_scores(
    event: RunUpEvent,
    log: TransferLog,
    records: dict[str, AgentEventRecord],
) -> dict[str, AgentEventRecord]:
    """Fill TS fields on the event's agent records (crash events only).

    d = t - t* with t* the ex-post price peak; trades whose d falls outside
    [-24, 24] do not contribute.  Percentile ranks use average ranks on
    ties, scaled to (0, 1] by the participant count.
    """
    if not event.crash:
        raise ValueError("timing scores are defined for crash events only")
    t_star = peak_hour(event)
    w = event.window

    buy_d: dict[str, list[int]] = defaultdict(list)
    sell_d: dict[str, list[int]] = defaultdict(list)
    for t in _window_trades(event, log):
        et = t.hour - event.t0
        d = et - t_star
        if d < -w or d > w:
            continue
        buy_d[t.to_wallet].append(d)
        sell_d[t.from_wallet].append(d)

    for wallet, rec in records.items():
        b = sum(ts_buy(d) for d in buy_d.get(wallet, ()))
        s = sum(ts_sell(d) for d in sell_d.get(wallet, ()))
        rec.ts_buy = b
        rec.ts_sell = s
        rec.ts = b + s

    wallets = sorted(records)
    n = len(wallets)
    if n:
        for metric in ("ts", "ts_buy", "ts_sell"):
            vals = np.array([getattr(records[w_], metric) for w_ in wallets])
            ranks = sstats.rankdata(vals, method="average") / n
            for w_, rk in zip(wallets, ranks):
                setattr(records[w_], metric + "_rank", float(rk))
    return records


class OwnershipSeries:
    """Hourly unique-owner fractions for one collection."""

    def __init__(self, collection: str, first_hour: int, owners: np.ndarray, supply: np.ndarray):
        self.collection = collection
        self.first_hour = first_hour
        self.owners = owners
        self.supply = supply

    def __len__(self) -> int:
        return len(self.owners)

    def point(self, hour: int) -> OwnershipPoint:
        i = hour - self.first_hour
        if i < 0 or i >= len(self):
            raise IndexError(f"hour {hour} outside ownership series of {self.collection}")
        return OwnershipPoint(self.collection, hour, int(self.owners[i]), int(self.supply[i]))

    def fraction(self, hour: int) -> float:
        return self.point(hour).fraction

    def points(self) -> Iterator[OwnershipPoint]:
        for i in range(len(self)):
            yield OwnershipPoint(
                self.collection, self.first_hour + i, int(self.owners[i]), int(self.supply[i])
            )


def unique_owner_series(log: TransferLog) -> tuple[dict[str, OwnershipSeries], int]:
    """Replay all transfers, tracking per-token owners; emit hourly fractions.

    A transfer whose token is unknown (never minted in the log) creates the
    token implicitly under the sender before moving it, keeping holder
    balances summing to supply; each such repair counts as one data gap.
    Returns (series by collection, data gap count).
    """
    gaps = 0
    series: dict[str, OwnershipSeries] = {}
    for name, transfers in sorted(log.by_collection().items()):
        first_hour = transfers[0].hour
        last_hour = max(t.hour for t in transfers)
        n = last_hour - first_hour + 1
        owners_by_hour = np.zeros(n, dtype=np.int64)
        supply_by_hour = np.zeros(n, dtype=np.int64)

        token_owner: dict[str, str] = {}
        balances: dict[str, int] = defaultdict(int)
        n_owners = 0
        supply = 0
        idx = 0
        for h in range(first_hour, last_hour + 1):
            while idx < len(transfers) and transfers[idx].hour == h:
                t = transfers[idx]
                idx += 1
                cur = token_owner.get(t.token)
                if t.is_mint:
                    if cur is None:
                        supply += 1
                        token_owner[t.token] = t.to_wallet
                        if balances[t.to_wallet] == 0:
                            n_owners += 1
                        balances[t.to_wallet] += 1
                        continue
                    gaps += 1  # duplicate mint: treat as a forced reassignment
                elif cur is None:
                    # data gap: token appears without a mint; create the
                    # sender as its implicit holder so balances stay == supply
                    gaps += 1
                    supply += 1
                    cur = t.from_wallet
                    token_owner[t.token] = cur
                    if balances[cur] == 0:
                        n_owners += 1
                    balances[cur] += 1
                elif cur != t.from_wallet:
                    gaps += 1
                balances[cur] -= 1
                if balances[cur] == 0:
                    n_owners -= 1
                token_owner[t.token] = t.to_wallet
                if balances[t.to_wallet] == 0:
                    n_owners += 1
                balances[t.to_wallet] += 1
            owners_by_hour[h - first_hour] = n_owners
            supply_by_hour[h - first_hour] = supply
        series[name] = OwnershipSeries(name, first_hour, owners_by_hour, supply_by_hour)
    return series, gaps


def unique_owner_change(event: RunUpEvent, series: dict[str, OwnershipSeries]) -> Optional[float]:
    """fraction(t=0) - fraction(t=-24) for the event's collection."""
    s = series.get(event.collection)
    if s is None:
        return None
    try:
        f0 = s.fraction(event.t0)
        f1 = s.fraction(event.t0 - event.window)
    except IndexError:
        return None
    if math.isnan(f0) or math.isnan(f1):
        return None
    return f0 - f1


def enrich_wallets(
    wallet_txs: list[WalletTx],
    categories: CategoryMap,
    as_of_ts: int,
) -> dict[str, WalletStats]:
    """Chain-activity profile per wallet: transaction counts and values,
    wallet age in days, and DeFi interaction counts by counterparty category."""
    stats: dict[str, WalletStats] = {}
    first_ts: dict[str, int] = {}
    for tx in wallet_txs:
        st = stats.get(tx.wallet)
        if st is None:
            st = stats[tx.wallet] = WalletStats(wallet=tx.wallet)
            first_ts[tx.wallet] = tx.timestamp
        st.n_tx += 1
        st.total_value_eth += tx.value_eth
        first_ts[tx.wallet] = min(first_ts[tx.wallet], tx.timestamp)
        cat = categories.category(tx.counterparty)
        if cat == "dex_swap":
            st.n_dex_swaps += 1
        elif cat == "dex_liquidity":
            st.n_dex_liquidity += 1
        elif cat == "lending":
            st.n_lending_ops += 1
    for wallet, st in stats.items():
        st.wallet_age_days = max(0.0, (as_of_ts - first_ts[wallet]) / 86400.0)
    return stats


def attach_nft_stats(
    stats: dict[str, WalletStats],
    events: list[RunUpEvent],
    log: TransferLog,
    records: list[AgentEventRecord],
) -> dict[str, WalletStats]:
    """Fill the NFT-side rows: trade counts, volume, holding period, and a
    per-hour profit rate (event profit divided by the 48-hour window span)."""
    holding: dict[str, list[float]] = defaultdict(list)
    open_buys: dict[tuple[str, str, str], deque] = defaultdict(deque)
    for ev in events:
        for t in _window_trades(ev, log):
            buyer, seller = t.to_wallet, t.from_wallet
            st = stats.setdefault(buyer, WalletStats(wallet=buyer))
            st.n_trades += 1
            st.nft_volume += t.price_eth
            st2 = stats.setdefault(seller, WalletStats(wallet=seller))
            st2.n_trades += 1
            st2.nft_volume += t.price_eth
            open_buys[(buyer, ev.collection, t.token)].append(t.timestamp)
            lots = open_buys.get((seller, ev.collection, t.token))
            if lots:
                bought = lots.popleft()
                holding[seller].append((t.timestamp - bought) / 3600.0)

    profits: dict[str, list[float]] = defaultdict(list)
    for r in records:
        profits[r.wallet].append(r.profit_pct)
    for wallet, st in stats.items():
        if holding.get(wallet):
            st.mean_holding_hours = float(np.mean(holding[wallet]))
        if profits.get(wallet):
            st.hourly_profit_pct = float(np.mean(profits[wallet])) / 48.0
    return stats


COMPARE_METRICS = [
    "n_trades",
    "nft_volume",
    "hourly_profit_pct",
    "mean_holding_hours",
    "n_tx",
    "total_value_eth",
    "wallet_age_days",
    "n_dex_swaps",
    "n_dex_liquidity",
    "n_lending_ops",
]


@dataclass
class GroupDifference:
    metric: str
    mean_sophisticated: float
    mean_other: float
    difference: float
    t_stat: float


def compare_sophisticated(
    stats: dict[str, WalletStats], ever_flagged: set[str]
) -> list[GroupDifference]:
    """Welch two-sample comparison of wallet characteristics between wallets
    flagged sophisticated at least once and everyone else."""
    soph = [s for w, s in stats.items() if w in ever_flagged]
    rest = [s for w, s in stats.items() if w not in ever_flagged]
    if not soph or not rest:
        raise ValueError("both comparison groups must be non-empty")
    out = []
    for metric in COMPARE_METRICS:
        a = np.array([getattr(s, metric) for s in soph if getattr(s, metric) is not None], dtype=float)
        b = np.array([getattr(s, metric) for s in rest if getattr(s, metric) is not None], dtype=float)
        if len(a) == 0 or len(b) == 0:
            continue
        diff = float(a.mean() - b.mean())
        if len(a) > 1 and len(b) > 1 and (a.var(ddof=1) + b.var(ddof=1)) > 0:
            t = float(sstats.ttest_ind(a, b, equal_var=False).statistic)
        else:
            t = 0.0 if diff == 0 else float("inf") * np.sign(diff)
        out.append(GroupDifference(metric, float(a.mean()), float(b.mean()), diff, t))
    return out


AGENT_CSV_COLUMNS = [
    "wallet",
    "event",
    "collection",
    "t0",
    "profit_pct",
    "n_buys",
    "n_sells",
    "sophisticated",
    "ts",
    "ts_buy",
    "ts_sell",
    "ts_rank",
    "ts_buy_rank",
    "ts_sell_rank",
]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def records_to_csv_lines(records: list[AgentEventRecord]) -> Iterator[str]:
    yield ",".join(AGENT_CSV_COLUMNS)
    for r in sorted(records, key=lambda r: (r.collection, r.t0, r.wallet)):
        yield ",".join(
            [
                r.wallet,
                r.event,
                r.collection,
                str(r.t0),
                _cell(r.profit_pct),
                str(r.n_buys),
                str(r.n_sells),
                "1" if r.sophisticated else "0",
                _cell(r.ts),
                _cell(r.ts_buy),
                _cell(r.ts_sell),
                _cell(r.ts_rank),
                _cell(r.ts_buy_rank),
                _cell(r.ts_sell_rank),
            ]
        )


def ownership_to_csv_lines(series: dict[str, OwnershipSeries]) -> Iterator[str]:
    yield "collection,hour,unique_owners,supply,fraction"
    for name in sorted(series):
        for p in series[name].points():
            frac = "" if p.supply == 0 else repr(p.fraction)
            yield f"{p.collection},{p.hour},{p.unique_owners},{p.supply},{frac}"


def records_from_csv_lines(lines: Iterable[str]) -> list[AgentEventRecord]:
    it = iter(lines)
    header = next(it).strip().split(",")
    if header != AGENT_CSV_COLUMNS:
        raise ValueError("unexpected agents CSV header")

    def opt(s: str) -> Optional[float]:
        return float(s) if s != "" else None

    out = []
    for line in it:
        line = line.strip()
        if not line:
            continue
        c = line.split(",")
        out.append(
            AgentEventRecord(
                wallet=c[0],
                event=c[1],
                collection=c[2],
                t0=int(c[3]),
                profit_pct=float(c[4]),
                n_buys=int(c[5]),
                n_sells=int(c[6]),
                sophisticated=c[7] == "1",
                ts=opt(c[8]),
                ts_buy=opt(c[9]),
                ts_sell=opt(c[10]),
                ts_rank=opt(c[11]),
                ts_buy_rank=opt(c[12]),
                ts_sell_rank=opt(c[13]),
            )
        )
    return out
