"""Hourly collection panel: aggregation, winsorization, and summary statistics.

One row per (collection, hour) from the collection's first transfer to its
last observed activity.  Hours with no trades carry the last traded mean
price forward with a zero return, so cumulative returns are defined over any
calendar window without injecting spurious price moves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .ingest import Diagnostics, TransferLog

PANEL_COLUMNS = [
    "collection",
    "hour",
    "price",
    "floor",
    "ret",
    "volume",
    "sales",
    "minted",
    "supply",
    "turnover",
    "mcap",
    "age_hours",
]

# Variables winsorization and summary statistics operate on.
PANEL_VARIABLES = [
    "price",
    "floor",
    "ret",
    "volume",
    "sales",
    "minted",
    "supply",
    "turnover",
    "mcap",
    "age_hours",
]


@dataclass
class CollectionPanel:
    """Dense hourly series for one collection; absolute hour indexing."""

    collection: str
    first_hour: int
    price: np.ndarray      # carried mean trade price, NaN before first trade
    ret: np.ndarray        # NaN where undefined (before/at first traded hour)
    volume: np.ndarray
    sales: np.ndarray
    minted: np.ndarray
    supply: np.ndarray
    turnover: np.ndarray   # percent; NaN while supply == 0
    floor: np.ndarray      # NaN without a listing feed
    mcap: np.ndarray       # NaN whenever floor is NaN
    age_hours: np.ndarray

    def __len__(self) -> int:
        return len(self.price)

    @property
    def last_hour(self) -> int:
        return self.first_hour + len(self) - 1

    def index_of(self, hour: int) -> int:
        idx = hour - self.first_hour
        if idx < 0 or idx >= len(self):
            raise IndexError(f"hour {hour} outside panel of {self.collection}")
        return idx

    def variable(self, name: str) -> np.ndarray:
        return getattr(self, name if name != "age_hours" else "age_hours")


@dataclass
class Panel:
    """Container of per-collection hourly series plus build metadata."""

    collections: dict[str, CollectionPanel]
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    metadata: dict = field(default_factory=dict)

    def __iter__(self) -> Iterator[CollectionPanel]:
        for name in sorted(self.collections):
            yield self.collections[name]

    def __len__(self) -> int:
        return sum(len(cp) for cp in self.collections.values())

    def get(self, collection: str) -> CollectionPanel:
        return self.collections[collection]


def build_panel(log: TransferLog) -> Panel:
    """Aggregate a TransferLog into the hourly collection panel."""
    diag = Diagnostics()
    collections: dict[str, CollectionPanel] = {}
    for name, transfers in sorted(log.by_collection().items()):
        cp = _build_collection(name, transfers, diag)
        collections[name] = cp
    return Panel(
        collections,
        diag,
        metadata={
            "return_convention": "carry-forward prices in no-trade hours, ret=0; "
            "ret at traded hour h is price(h)/price(h-1)-1 on carried prices",
            "floor_source": "absent (trade-only input, no listing feed)",
        },
    )


def _build_collection(name: str, transfers: list, diag: Diagnostics) -> CollectionPanel:
    hours = np.array([t.hour for t in transfers], dtype=np.int64)
    first_hour = int(hours.min())
    n = int(hours.max()) - first_hour + 1
    idx = hours - first_hour

    prices = np.array([t.price_eth for t in transfers], dtype=np.float64)
    is_trade = prices > 0
    is_mint = np.array([t.is_mint for t in transfers], dtype=bool)

    volume = np.zeros(n)
    sales = np.zeros(n)
    minted = np.zeros(n)
    np.add.at(volume, idx[is_trade], prices[is_trade])
    np.add.at(sales, idx[is_trade], 1.0)
    np.add.at(minted, idx[is_mint], 1.0)

    # Mean trade price per hour, then carry forward through no-trade hours.
    price = np.full(n, np.nan)
    traded = sales > 0
    price[traded] = volume[traded] / sales[traded]
    carried = _forward_fill(price)

    ret = np.zeros(n)
    prev = np.concatenate(([np.nan], carried[:-1]))
    with np.errstate(invalid="ignore", divide="ignore"):
        hourly = carried / prev - 1.0
    ret[traded] = hourly[traded]
    ret[np.isnan(carried)] = np.nan
    # First priced hour has no prior carried price.
    ret[np.isnan(prev) & ~np.isnan(carried)] = np.nan

    supply = np.cumsum(minted)
    turnover = np.full(n, np.nan)
    has_supply = supply > 0
    turnover[has_supply] = sales[has_supply] / supply[has_supply] * 100.0
    if supply[-1] == 0 and sales.sum() > 0:
        diag.warn(f"collection {name}: trades but no mints, turnover undefined")

    floor = np.full(n, np.nan)
    mcap = np.full(n, np.nan)
    age_hours = np.arange(n, dtype=np.float64)

    return CollectionPanel(
        collection=name,
        first_hour=first_hour,
        price=carried,
        ret=ret,
        volume=volume,
        sales=sales,
        minted=minted,
        supply=supply,
        turnover=turnover,
        floor=floor,
        mcap=mcap,
        age_hours=age_hours,
    )


def _forward_fill(values: np.ndarray) -> np.ndarray:
    """Carry the last finite value forward; leading NaNs stay NaN."""
    mask = ~np.isnan(values)
    idx = np.where(mask, np.arange(len(values)), 0)
    np.maximum.accumulate(idx, out=idx)
    out = values[idx]
    out[~mask.cumsum().astype(bool)] = np.nan
    return out


def winsorize(panel: Panel, level: float = 0.01) -> Panel:
    """Clip every panel variable at its pooled lower/upper order-statistic
    quantiles (level and 1-level).

    The clip bounds are the inner order statistics (ceil on the lower index,
    floor on the upper), which makes the operation exactly idempotent: once a
    tail is pinned to the bound, re-winsorizing at the same level finds the
    same bound.  A panel with fewer than 1/level observations of a variable
    is returned unchanged for that variable, with a warning.
    """
    if level == 0.0:
        return panel
    if not (0.0 < level < 0.5):
        raise ValueError("winsorization level must lie in (0, 0.5)")
    diag = Diagnostics()
    diag.messages.extend(panel.diagnostics.messages)
    diag.rejected = panel.diagnostics.rejected
    diag.warnings = panel.diagnostics.warnings

    bounds: dict[str, Optional[tuple[float, float]]] = {}
    for var in PANEL_VARIABLES:
        pooled = np.concatenate([cp.variable(var) for cp in panel]) if panel.collections else np.array([])
        pooled = pooled[~np.isnan(pooled)]
        if len(pooled) < 1.0 / level:
            bounds[var] = None
            diag.warn(f"winsorize: {var} has {len(pooled)} obs < {1.0/level:.0f}, left unchanged")
            continue
        pooled.sort()
        lo_i = math.ceil(level * (len(pooled) - 1))
        hi_i = math.floor((1.0 - level) * (len(pooled) - 1))
        bounds[var] = (float(pooled[lo_i]), float(pooled[hi_i]))

    new_collections: dict[str, CollectionPanel] = {}
    for cp in panel:
        kwargs = {"collection": cp.collection, "first_hour": cp.first_hour}
        for var in PANEL_VARIABLES:
            arr = cp.variable(var).copy()
            if bounds[var] is not None:
                lo, hi = bounds[var]
                np.clip(arr, lo, hi, out=arr)
            kwargs[var] = arr
        new_collections[cp.collection] = CollectionPanel(**kwargs)
    meta = dict(panel.metadata)
    meta["winsorize_level"] = level
    return Panel(new_collections, diag, meta)


@dataclass
class StatsTable:
    """Per-variable summary moments and quantiles."""

    rows: dict[str, dict[str, float]]

    def variables(self) -> list[str]:
        return list(self.rows)

    def __getitem__(self, var: str) -> dict[str, float]:
        return self.rows[var]

    def format(self) -> str:
        cols = ["mean", "sd", "min", "p25", "median", "p75", "max", "n"]
        width = max(len(v) for v in self.rows) + 2
        lines = ["variable".ljust(width) + "".join(c.rjust(12) for c in cols)]
        for var, stats in self.rows.items():
            cells = []
            for c in cols:
                val = stats[c]
                cells.append((f"{int(val)}" if c == "n" else f"{val:.4g}").rjust(12))
            lines.append(var.ljust(width) + "".join(cells))
        return "\n".join(lines)


def summary_stats(panel: Panel) -> StatsTable:
    """Table-style summary statistics over the pooled panel."""
    if not panel.collections or len(panel) == 0:
        raise ValueError("summary_stats requires a non-empty panel")
    rows: dict[str, dict[str, float]] = {}
    for var in PANEL_VARIABLES:
        pooled = np.concatenate([cp.variable(var) for cp in panel])
        pooled = pooled[~np.isnan(pooled)]
        if len(pooled) == 0:
            rows[var] = {k: float("nan") for k in ("mean", "sd", "min", "p25", "median", "p75", "max")}
            rows[var]["n"] = 0.0
            continue
        rows[var] = {
            "mean": float(np.mean(pooled)),
            "sd": float(np.std(pooled, ddof=1)) if len(pooled) > 1 else 0.0,
            "min": float(np.min(pooled)),
            "p25": float(np.percentile(pooled, 25)),
            "median": float(np.percentile(pooled, 50)),
            "p75": float(np.percentile(pooled, 75)),
            "max": float(np.max(pooled)),
            "n": float(len(pooled)),
        }
    return StatsTable(rows)


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return ""
    return repr(x) if isinstance(x, float) else str(x)


def panel_to_csv_lines(panel: Panel) -> Iterator[str]:
    """Emit the panel as CSV rows, sorted by (collection, hour)."""
    yield ",".join(PANEL_COLUMNS)
    for cp in panel:
        for i in range(len(cp)):
            yield ",".join(
                [
                    cp.collection,
                    str(cp.first_hour + i),
                    _fmt(float(cp.price[i])),
                    _fmt(float(cp.floor[i])),
                    _fmt(float(cp.ret[i])),
                    _fmt(float(cp.volume[i])),
                    _fmt(float(cp.sales[i])),
                    _fmt(float(cp.minted[i])),
                    _fmt(float(cp.supply[i])),
                    _fmt(float(cp.turnover[i])),
                    _fmt(float(cp.mcap[i])),
                    _fmt(float(cp.age_hours[i])),
                ]
            )


def panel_from_csv_lines(lines: Iterable[str]) -> Panel:
    """Rebuild a Panel from its CSV serialization."""
    rows_by_collection: dict[str, list[list[str]]] = {}
    it = iter(lines)
    header = next(it).strip()
    if header.split(",") != PANEL_COLUMNS:
        raise ValueError("unexpected panel CSV header")
    for line in it:
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        rows_by_collection.setdefault(parts[0], []).append(parts)

    def col(rows: list[list[str]], i: int) -> np.ndarray:
        return np.array([float(r[i]) if r[i] != "" else np.nan for r in rows])

    collections = {}
    for name, rows in sorted(rows_by_collection.items()):
        rows.sort(key=lambda r: int(r[1]))
        collections[name] = CollectionPanel(
            collection=name,
            first_hour=int(rows[0][1]),
            price=col(rows, 2),
            floor=col(rows, 3),
            ret=col(rows, 4),
            volume=col(rows, 5),
            sales=col(rows, 6),
            minted=col(rows, 7),
            supply=col(rows, 8),
            turnover=col(rows, 9),
            mcap=col(rows, 10),
            age_hours=col(rows, 11),
        )
    return Panel(collections)
