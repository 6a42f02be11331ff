"""Price run-up detection, crash labeling, and event-level predictors.

A collection experiences a run-up at hour h when its carried mean price has
at least doubled over the trailing 24 hours.  Each event owns a +/-24h
window around its anchor; anchors of one collection stay >= 48 hours apart
(windows may touch at the shared edge hour but never overlap in interior),
the window must turn over at least 10 ETH, and windows truncated by the
sample boundary are discarded because their ex-post label would be
undefined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

from .ingest import TransferLog
from .panel import CollectionPanel, Panel


@dataclass(frozen=True)
class DetectorParams:
    runup_threshold: float = 1.00     # trailing return >= 100%
    lookback: int = 24                # hours of the trailing return
    min_volume_eth: float = 10.0      # window volume floor
    window: int = 24                  # half-width of the event window
    crash_threshold: float = -0.40    # ex-post cumulative return bound
    acceleration_variant: str = "text"  # "text" | "caption"


@dataclass
class RunUpEvent:
    """One detected run-up with its full event-time window (t in [-24, 24])."""

    collection: str
    t0: int                         # absolute panel hour of identification
    window: int
    price: np.ndarray               # 2*window+1 carried prices
    ret: np.ndarray                 # panel hourly returns over the window
    volume: np.ndarray
    sales: np.ndarray
    turnover: np.ndarray
    age0: float                     # collection age (hours) at t=0
    cumret: np.ndarray              # anchored so cumret[-window] == 0
    volume_eth: float
    ex_post_ret: float
    crash: bool
    active_wallets: Optional[int] = None

    @property
    def event_id(self) -> str:
        return f"{self.collection}@{self.t0}"

    def at(self, t: int) -> int:
        """Array index of event time t in [-window, window]."""
        if t < -self.window or t > self.window:
            raise IndexError(f"event time {t} outside window")
        return t + self.window

    def price_at(self, t: int) -> float:
        return float(self.price[self.at(t)])


@dataclass
class PredictorRow:
    """Event-level regression row: labels, aggregate and agent predictors."""

    collection: str
    t0: int
    crash: bool
    ex_post_ret: float
    volatility: Optional[float]
    turnover: Optional[float]
    age_hours: float
    acceleration: float
    # Filled by agents / washtrade modules.
    sophisticated_frac: Optional[float] = None
    unique_owner_change: Optional[float] = None
    wash_log_volume: Optional[float] = None
    # Ex-post liquidity outcomes.
    turnover_post: Optional[float] = None
    amihud: Optional[float] = None
    volatility_post: Optional[float] = None
    # Event-clustering regressors.
    prior_runup_count: Optional[int] = None
    prior_crash_likelihood: Optional[float] = None
    # Strategy accounting.
    entry_price: Optional[float] = None
    exit_price: Optional[float] = None
    active_wallets: Optional[int] = None

    @property
    def event_id(self) -> str:
        return f"{self.collection}@{self.t0}"


def detect_runups(
    panel: Panel,
    params: DetectorParams = DetectorParams(),
    log: Optional[TransferLog] = None,
) -> list[RunUpEvent]:
    """Scan every collection chronologically for run-up events.

    Greedy earliest-first selection: the first qualifying hour claims its
    window and scanning resumes 2*window hours later, so anchors are at
    least 48 hours apart.  A selected anchor that fails the volume floor or
    is truncated by the sample edge is dropped but still consumes its
    window.
    """
    events: list[RunUpEvent] = []
    for cp in panel:
        events.extend(_detect_collection(cp, params))
    events.sort(key=lambda e: (e.collection, e.t0))
    if log is not None:
        attach_activity(events, log)
    return events


def _detect_collection(cp: CollectionPanel, params: DetectorParams) -> list[RunUpEvent]:
    n = len(cp)
    look, w = params.lookback, params.window
    if n < look + 1:
        return []
    price = cp.price
    out: list[RunUpEvent] = []
    h = look
    while h < n:
        base = price[h - look]
        cur = price[h]
        if not (np.isnan(base) or np.isnan(cur)) and base > 0 and cur / base - 1.0 >= params.runup_threshold:
            if h - w >= 0 and h + w <= n - 1:
                vol = float(cp.volume[h - w : h + w + 1].sum())
                if vol >= params.min_volume_eth:
                    out.append(_make_event(cp, h, vol, params))
            h += 2 * w  # window consumed either way
        else:
            h += 1
    return out


def _make_event(cp: CollectionPanel, h: int, vol: float, params: DetectorParams) -> RunUpEvent:
    w = params.window
    sl = slice(h - w, h + w + 1)
    price = cp.price[sl].copy()
    ret = cp.ret[sl].copy()
    cumret = price / price[0] - 1.0
    ex_post = _compound(ret[w + 1 :])
    return RunUpEvent(
        collection=cp.collection,
        t0=cp.first_hour + h,
        window=w,
        price=price,
        ret=ret,
        volume=cp.volume[sl].copy(),
        sales=cp.sales[sl].copy(),
        turnover=cp.turnover[sl].copy(),
        age0=float(cp.age_hours[h]),
        cumret=cumret,
        volume_eth=vol,
        ex_post_ret=ex_post,
        crash=ex_post < params.crash_threshold,
    )


def _compound(rets: np.ndarray) -> float:
    return float(np.prod(1.0 + rets) - 1.0)


def classify_crash(event: RunUpEvent, threshold: float = -0.40) -> bool:
    """Crash iff the compounded return over t in [1, 24] is below threshold."""
    return _compound(event.ret[event.window + 1 :]) < threshold


def materialize_event(cp: CollectionPanel, t0: int, params: DetectorParams) -> RunUpEvent:
    """Rebuild the window of a known anchor from a panel (used when events
    come from a CSV rather than a fresh detection pass)."""
    h = cp.index_of(t0)
    w = params.window
    if h - w < 0 or h + w > len(cp) - 1:
        raise ValueError(f"anchor {t0} of {cp.collection} has a truncated window")
    vol = float(cp.volume[h - w : h + w + 1].sum())
    return _make_event(cp, h, vol, params)


def attach_activity(events: list[RunUpEvent], log: TransferLog) -> None:
    """Fill active_wallets: distinct traders in each event window."""
    by_coll = log.by_collection()
    for ev in events:
        lo = (ev.t0 - ev.window) * 3600
        hi = (ev.t0 + ev.window + 1) * 3600
        wallets: set[str] = set()
        for t in by_coll.get(ev.collection, []):
            if t.is_trade and lo <= t.timestamp < hi:
                wallets.add(t.from_wallet)
                wallets.add(t.to_wallet)
        ev.active_wallets = len(wallets)


def aggregate_predictors(event: RunUpEvent, variant: str = "text") -> PredictorRow:
    """Compute the aggregate (collection-level) crash predictors of one event.

    volatility: sample sd of hourly returns with event-time endpoints in
    [-24, 0] (the return at -24 comes from the panel and may be undefined at
    a collection's first priced hour; it is then excluded).
    turnover: mean hourly turnover over the same interval, absent without
    supply.
    acceleration: "text" variant R[-24,0] - R[-24,-12]; "caption" variant
    R[-12,0] - R[-24,0].
    """
    w = event.window
    exante_rets = event.ret[: w + 1]
    finite = exante_rets[~np.isnan(exante_rets)]
    volatility = float(np.std(finite, ddof=1)) if len(finite) > 1 else None

    to = event.turnover[: w + 1]
    to_finite = to[~np.isnan(to)]
    turnover = float(np.mean(to_finite)) if len(to_finite) else None

    p = event.price
    r_full = p[w] / p[0] - 1.0          # R[-24, 0]
    r_early = p[w // 2] / p[0] - 1.0    # R[-24, -12]
    r_late = p[w] / p[w // 2] - 1.0     # R[-12, 0]
    if variant == "text":
        acceleration = float(r_full - r_early)
    elif variant == "caption":
        acceleration = float(r_late - r_full)
    else:
        raise ValueError(f"unknown acceleration variant {variant!r}")

    return PredictorRow(
        collection=event.collection,
        t0=event.t0,
        crash=event.crash,
        ex_post_ret=event.ex_post_ret,
        volatility=volatility,
        turnover=turnover,
        age_hours=event.age0,
        acceleration=acceleration,
        entry_price=float(event.price[w + 1]),
        exit_price=float(event.price[2 * w]),
        active_wallets=event.active_wallets,
    )


def expost_liquidity(event: RunUpEvent) -> dict[str, Optional[float]]:
    """Ex-post liquidity outcomes over t in [1, 24]."""
    w = event.window
    post_rets = event.ret[w + 1 :]
    post_turnover = event.turnover[w + 1 :]
    post_volume = float(event.volume[w + 1 :].sum())

    finite_to = post_turnover[~np.isnan(post_turnover)]
    turnover_post = float(np.mean(finite_to)) if len(finite_to) else None
    amihud = abs(event.ex_post_ret) / post_volume if post_volume > 0 else None
    volatility_post = float(np.std(post_rets, ddof=1)) if len(post_rets) > 1 else None
    return {
        "turnover_post": turnover_post,
        "amihud": amihud,
        "volatility_post": volatility_post,
    }


def build_predictor_rows(
    events: list[RunUpEvent],
    variant: str = "text",
) -> list[PredictorRow]:
    """Predictor rows with ex-post liquidity attached, sorted by (collection, t0)."""
    rows = []
    for ev in events:
        row = aggregate_predictors(ev, variant)
        liq = expost_liquidity(ev)
        row.turnover_post = liq["turnover_post"]
        row.amihud = liq["amihud"]
        row.volatility_post = liq["volatility_post"]
        rows.append(row)
    return rows


EVENT_CSV_COLUMNS = [
    "collection",
    "t0",
    "crash",
    "ex_post_ret",
    "volume_eth",
    "active_wallets",
    "volatility",
    "turnover",
    "age_hours",
    "acceleration",
    "sophisticated_frac",
    "unique_owner_change",
    "wash_log_volume",
    "turnover_post",
    "amihud",
    "volatility_post",
    "prior_runup_count",
    "prior_crash_likelihood",
    "entry_price",
    "exit_price",
]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv_lines(rows: list[PredictorRow], events: Optional[list[RunUpEvent]] = None) -> Iterator[str]:
    vol_by_id = {e.event_id: e.volume_eth for e in events} if events else {}
    yield ",".join(EVENT_CSV_COLUMNS)
    for r in sorted(rows, key=lambda r: (r.collection, r.t0)):
        yield ",".join(
            [
                r.collection,
                str(r.t0),
                "1" if r.crash else "0",
                _cell(r.ex_post_ret),
                _cell(vol_by_id.get(r.event_id)),
                _cell(r.active_wallets),
                _cell(r.volatility),
                _cell(r.turnover),
                _cell(r.age_hours),
                _cell(r.acceleration),
                _cell(r.sophisticated_frac),
                _cell(r.unique_owner_change),
                _cell(r.wash_log_volume),
                _cell(r.turnover_post),
                _cell(r.amihud),
                _cell(r.volatility_post),
                _cell(r.prior_runup_count),
                _cell(r.prior_crash_likelihood),
                _cell(r.entry_price),
                _cell(r.exit_price),
            ]
        )


def rows_from_csv_lines(lines: Iterable[str]) -> list[PredictorRow]:
    it = iter(lines)
    header = next(it).strip().split(",")
    if header != EVENT_CSV_COLUMNS:
        raise ValueError("unexpected events CSV header")

    def opt_float(s: str) -> Optional[float]:
        return float(s) if s != "" else None

    def opt_int(s: str) -> Optional[int]:
        return int(s) if s != "" else None

    rows = []
    for line in it:
        line = line.strip()
        if not line:
            continue
        c = line.split(",")
        rows.append(
            PredictorRow(
                collection=c[0],
                t0=int(c[1]),
                crash=c[2] == "1",
                ex_post_ret=float(c[3]),
                volatility=opt_float(c[6]),
                turnover=opt_float(c[7]),
                age_hours=float(c[8]),
                acceleration=float(c[9]),
                sophisticated_frac=opt_float(c[10]),
                unique_owner_change=opt_float(c[11]),
                wash_log_volume=opt_float(c[12]),
                turnover_post=opt_float(c[13]),
                amihud=opt_float(c[14]),
                volatility_post=opt_float(c[15]),
                prior_runup_count=opt_int(c[16]),
                prior_crash_likelihood=opt_float(c[17]),
                entry_price=opt_float(c[18]),
                exit_price=opt_float(c[19]),
                active_wallets=opt_int(c[5]),
            )
        )
    return rows
