"""Synthetic NFT market generator with planted, machine-checkable ground truth.

Ground-truth guarantees, all by construction and re-asserted on the emitted
trades before returning:

* Run-up anchors.  Outside planted ramps the hourly log-price step is
  hard-clipped at +/-0.02 and every hour carries at least one trade, so any
  trailing 24-hour price ratio stays below e^0.48 * 1.006 < 2.  A planted
  ramp freezes the path for the 24 hours before its window, climbs by
  g_e <= 1.105 over [-24, -12] and by 2.1/g_e over [-12, 0]; every pre-anchor
  trailing ratio then stays below 2 and the first qualifying hour is exactly
  the planted anchor.
* Wash trades.  Planted loops use dedicated wallets and dedicated tokens,
  while ordinary trades always move a token from a single-token holder to a
  brand-new wallet funded by a unique funder, so no ordinary trade can
  satisfy any wash filter and every loop trade satisfies exactly its
  expected filters.
* Sophistication.  Pool wallets ride their assigned events (buy early, sell
  at the ex-post peak) so their rolling five-event profit stays far above
  the 25% bar once the burn-in events seed their history; every other wallet
  participates in at most two events, below the five-event floor.
* Ownership.  Ordinary trades are owner-count neutral, wash wallets hold
  keeper tokens, and the whale only moves tokens through free transfers, so
  the unique-owner fraction moves only with the planted dispersion or
  concentration transfers.

Crash labels are drawn from a logistic model of the planted feature values
with configurable signed coefficients, so cross-sectional regressions of
measured features on the labels are consistent for those signs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ingest import (
    ZERO_ADDRESS,
    CategoryMap,
    Diagnostics,
    FundingEdge,
    FundingIndex,
    Transfer,
    TransferLog,
    WalletTx,
)

EPOCH_HOUR = 447072  # 2021-01-01 00:00 UTC in hours since the unix epoch

FEATURES = (
    "volatility",
    "turnover",
    "acceleration",
    "sophisticated_frac",
    "unique_owner_change",
    "wash_volume",
)

# Crash-probability coefficient per standardized planted feature; the signs
# are the planted direction each feature pushes the crash odds.
DEFAULT_EFFECTS = {
    "volatility": 1.1,
    "turnover": -1.1,
    "acceleration": 1.1,
    "sophisticated_frac": -1.1,
    "unique_owner_change": -1.1,
    "wash_volume": 1.1,
}

_STEP_CLIP = 0.02           # max |hourly log step| outside planted ramps
_TRADE_NOISE_SD = 0.0005
_TRADE_NOISE_CLIP = 0.0015  # max |per-trade log price noise|
_RUNUP_FACTOR = 2.1         # planted trailing growth at the anchor
_MAX_EARLY_GROWTH = 1.105   # cap on g_e; keeps pre-anchor trailing below 2
_WASH_TRADES_PER_LOOP = 40  # hard cap; volume degrades gracefully past it

# trades allowed per wash token before an untargeted filter would trip
_TOKEN_CAP = {"self_trade": 2, "inverted_pair": 4, "repeat_buyer": 5, "common_funder": 2}


class SynthConfigError(ValueError):
    """Config cannot produce a consistent market."""


@dataclass
class SynthConfig:
    seed: int = 0
    n_collections: int = 8
    n_wallets: int = 60_000
    horizon_hours: int = 1200
    runup_rate: float = 4.5            # planted events per 1,000 collection-hours
    crash_prob_base: float = 0.5
    planted_effects: dict = field(default_factory=lambda: dict(DEFAULT_EFFECTS))
    wash_loop_count: int = 3           # wash loops planted per event (0 disables)
    sophisticated_share: float = 0.0008  # pool size as a share of n_wallets
    # secondary knobs
    supply: int = 300                  # ordinary tokens minted per collection
    burn_in_events: int = 6            # earliest events seed the pool's profits
    turnover_range: tuple = (0.25, 1.2)     # planted mean hourly turnover, pct
    volatility_range: tuple = (0.02, 0.22)  # planted zigzag log amplitude
    owner_change_range: float = 0.15   # max |planted owner-fraction change|
    wash_volume_max: float = 50.0      # max planted wash ETH per event
    min_event_volume: float = 12.0     # self-check floor above the 10 ETH rule
    base_price_range: tuple = (0.4, 2.0)
    crash_ret_range: tuple = (-0.82, -0.48)     # planted ex-post return, crashes
    noncrash_ret_range: tuple = (-0.25, 0.35)   # planted ex-post return, noncrashes
    n_enriched_wallets: int = 400      # non-pool wallets given chain histories
    detector_lookback: int = 24
    detector_window: int = 24

    def pool_size(self) -> int:
        return int(round(self.sophisticated_share * self.n_wallets))

    def effects(self) -> dict:
        return {f: float(self.planted_effects.get(f, 0.0)) for f in FEATURES}

    def validate(self) -> None:
        if self.seed < 0:
            raise SynthConfigError("seed must be non-negative")
        if not 0.0 <= self.crash_prob_base <= 1.0:
            raise SynthConfigError("crash_prob_base must lie in [0, 1]")
        if self.n_collections < 1 or self.horizon_hours < 120:
            raise SynthConfigError("need at least 1 collection and 120 hours")
        if self.runup_rate < 0:
            raise SynthConfigError("runup_rate must be non-negative")
        if not 0 <= self.wash_loop_count <= 10:
            raise SynthConfigError("wash_loop_count outside the supported 0..10 budget")
        if not 0.0 <= self.sophisticated_share <= 0.5:
            raise SynthConfigError("sophisticated_share must lie in [0, 0.5]")
        unknown = set(self.planted_effects) - set(FEATURES)
        if unknown:
            raise SynthConfigError(f"unknown planted effects: {sorted(unknown)}")
        effects = self.effects()
        if effects["sophisticated_frac"] != 0.0 and self.pool_size() < 10:
            raise SynthConfigError(
                "sophisticated_frac effect needs a pool of at least 10 wallets; "
                "raise sophisticated_share or n_wallets"
            )
        if effects["wash_volume"] != 0.0 and self.wash_loop_count == 0:
            raise SynthConfigError("wash_volume effect needs wash_loop_count > 0")
        if self.pool_size() + 30 > self.supply // 2:
            raise SynthConfigError("supply too small for the sophisticated pool")
        if not (self.crash_ret_range[1] < -0.45 and self.noncrash_ret_range[0] > -0.35):
            raise SynthConfigError("planted ex-post return ranges must clear the -40% label threshold")
        n_events = int(round(self.runup_rate * self.horizon_hours / 1000.0)) * self.n_collections
        demand = self.n_collections * (self.horizon_hours * 1.2 + self.supply) + n_events * 450
        if demand > self.n_wallets:
            raise SynthConfigError(
                f"n_wallets={self.n_wallets} below the estimated fresh-wallet demand of {int(demand)}"
            )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_collections": self.n_collections,
            "n_wallets": self.n_wallets,
            "horizon_hours": self.horizon_hours,
            "runup_rate": self.runup_rate,
            "crash_prob_base": self.crash_prob_base,
            "planted_effects": dict(self.planted_effects),
            "wash_loop_count": self.wash_loop_count,
            "sophisticated_share": self.sophisticated_share,
            "supply": self.supply,
            "burn_in_events": self.burn_in_events,
            "turnover_range": list(self.turnover_range),
            "volatility_range": list(self.volatility_range),
            "owner_change_range": self.owner_change_range,
            "wash_volume_max": self.wash_volume_max,
            "min_event_volume": self.min_event_volume,
            "base_price_range": list(self.base_price_range),
            "crash_ret_range": list(self.crash_ret_range),
            "noncrash_ret_range": list(self.noncrash_ret_range),
            "n_enriched_wallets": self.n_enriched_wallets,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        cfg = cls()
        for key, val in d.items():
            if not hasattr(cfg, key):
                raise SynthConfigError(f"unknown synth config key {key!r}")
            if key in ("turnover_range", "volatility_range", "base_price_range", "crash_ret_range", "noncrash_ret_range"):
                val = tuple(val)
            setattr(cfg, key, val)
        return cfg


@dataclass
class PlantedEvent:
    collection: str
    t0: int                     # absolute panel hour of the planted anchor
    burn_in: bool
    crash: bool
    crash_prob: float
    ex_post_ret: float          # planted path-level ex-post return
    peak_t: int                 # ex-post peak hour in event time
    latents: dict               # standardized feature values in the crash logit
    targets: dict               # planted feature values on the measurement scale

    @property
    def event_id(self) -> str:
        return f"{self.collection}@{self.t0}"


@dataclass
class GroundTruth:
    planted_events: list[PlantedEvent]
    wash_expected: dict         # (tx_id, token) -> sorted expected filter list
    soph_wallets: list[str]
    eth_usd_rate: float

    def anchors(self) -> set[tuple[str, int]]:
        return {(e.collection, e.t0) for e in self.planted_events}

    def regression_events(self) -> list[PlantedEvent]:
        return [e for e in self.planted_events if not e.burn_in]

    def to_json(self) -> str:
        return json.dumps(
            {
                "planted_events": [
                    {
                        "collection": e.collection,
                        "t0": e.t0,
                        "burn_in": e.burn_in,
                        "crash": e.crash,
                        "crash_prob": e.crash_prob,
                        "ex_post_ret": e.ex_post_ret,
                        "peak_t": e.peak_t,
                        "latents": e.latents,
                        "targets": e.targets,
                    }
                    for e in self.planted_events
                ],
                "wash_expected": [
                    {"tx_id": k[0], "token": k[1], "filters": v}
                    for k, v in sorted(self.wash_expected.items())
                ],
                "soph_wallets": self.soph_wallets,
                "eth_usd_rate": self.eth_usd_rate,
            },
            sort_keys=True,
            indent=1,
        )


@dataclass
class SyntheticMarket:
    log: TransferLog
    funding: FundingIndex
    wallet_txs: list[WalletTx]
    categories: CategoryMap
    truth: GroundTruth
    config: SynthConfig


@dataclass
class _WashLoop:
    hour: int
    kind: str
    target_eth: float
    n_trades: int = 0
    planned_vol: float = 0.0


@dataclass
class _EventPlan:
    t0: int                         # collection-local anchor hour
    burn_in: bool = False
    latents: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    crash: bool = False
    crash_prob: float = 0.0
    ex_post_ret: float = 0.0
    peak_t: int = 1
    wash_loops: list = field(default_factory=list)
    buys: list = field(default_factory=list)        # (hour, wallet|None, is_pool)
    pool_sells: list = field(default_factory=list)  # (hour, wallet)
    exits: list = field(default_factory=list)       # (hour, buy_hour)


class _Ids:
    def __init__(self) -> None:
        self.fresh_count = 0
        self.tx_count = 0

    def fresh_wallet(self) -> str:
        w = f"W{self.fresh_count:07d}"
        self.fresh_count += 1
        return w

    def tx(self) -> str:
        t = f"TX{self.tx_count:09d}"
        self.tx_count += 1
        return t


def _category_map() -> CategoryMap:
    entries: dict[str, str] = {}
    for i in range(10):
        entries[f"ADDR-DEXSWAP-{i:02d}"] = "dex_swap"
    for i in range(5):
        entries[f"ADDR-DEXLIQ-{i:02d}"] = "dex_liquidity"
    for i in range(5):
        entries[f"ADDR-LEND-{i:02d}"] = "lending"
    for i in range(3):
        entries[f"ADDR-CEX-{i:02d}"] = "cex"
    for i in range(2):
        entries[f"ADDR-MIXER-{i:02d}"] = "mixer"
    for i in range(10):
        entries[f"ADDR-OTHER-{i:02d}"] = "other"
    return CategoryMap(entries, Diagnostics())


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def generate_market(config: SynthConfig) -> SyntheticMarket:
    """Generate one fully labeled market; byte-deterministic in config.seed."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    seeds = root.spawn(config.n_collections + 1)
    market_rng = np.random.Generator(np.random.Philox(seeds[-1]))

    ids = _Ids()
    categories = _category_map()
    eth_usd = 1900.0
    pool = [f"SOPH{w:05d}" for w in range(config.pool_size())]

    # planning pass: anchors per collection, then global burn-in marking
    births, anchor_plan, rngs = [], [], []
    # stagger births so a collection's event index decorrelates from
    # calendar time (cumulative wash would otherwise trend the crash rate)
    birth_span = max(24, int(0.4 * config.horizon_hours))
    for c in range(config.n_collections):
        rng = np.random.Generator(np.random.Philox(seeds[c]))
        rngs.append(rng)
        birth = int(rng.integers(0, birth_span))
        births.append(birth)
        anchor_plan.append(_plan_anchors(config, rng, birth))

    flat = sorted((a, c) for c, anchors in enumerate(anchor_plan) for a in anchors)
    n_burn = min(config.burn_in_events if pool else 0, len(flat))
    burn_cut = flat[n_burn - 1][0] if n_burn else -1
    burn_in = {(c, a) for a, c in flat if a <= burn_cut}

    transfers: list[Transfer] = []
    funding: dict[str, FundingEdge] = {}
    wash_expected: dict[tuple[str, str], list[str]] = {}
    planted: list[PlantedEvent] = []
    active_nonpool: list[str] = []

    for c in range(config.n_collections):
        b = _CollectionBuilder(
            config,
            f"C{c:03d}",
            births[c],
            anchor_plan[c],
            {a for (cc, a) in burn_in if cc == c},
            rngs[c],
            ids,
            pool,
            eth_usd,
        )
        b.build()
        transfers.extend(b.transfers)
        funding.update(b.funding)
        wash_expected.update(b.wash_expected)
        planted.extend(b.planted)
        active_nonpool.extend(b.active_nonpool)

    for w in pool:
        funding.setdefault(
            w, FundingEdge(wallet=w, first_funder=f"F-{w}", funded_at=EPOCH_HOUR * 3600 - 900)
        )

    log = TransferLog(transfers)
    _assert_ground_truth(config, log, planted)

    wallet_txs = _wallet_histories(config, market_rng, pool, active_nonpool, eth_usd)
    truth = GroundTruth(
        planted_events=sorted(planted, key=lambda e: (e.collection, e.t0)),
        wash_expected=wash_expected,
        soph_wallets=list(pool),
        eth_usd_rate=eth_usd,
    )
    return SyntheticMarket(log, FundingIndex(funding), wallet_txs, categories, truth, config)


def _plan_anchors(config: SynthConfig, rng: np.random.Generator, birth: int) -> list[int]:
    """Collection-local anchor hours, spaced so windows and freezes fit."""
    n_target = int(round(config.runup_rate * config.horizon_hours / 1000.0))
    if n_target == 0:
        return []
    usable = config.horizon_hours - birth - 110
    if usable <= 0:
        return []
    base_gap = max(76, usable // n_target)
    anchors: list[int] = []
    pos = birth + 52 + int(rng.integers(0, 12))
    while len(anchors) < n_target and pos <= config.horizon_hours - 26:
        anchors.append(pos)
        pos += base_gap + int(rng.integers(0, 16))
    return anchors


class _CollectionBuilder:
    """Builds the full transfer stream of one collection in phases:
    plan -> mint -> path and labels -> hour-by-hour emission."""

    def __init__(self, config, name, birth, anchors, burn_anchors, rng, ids, pool, eth_usd):
        self.cfg = config
        self.name = name
        self.birth = birth
        self.anchors = anchors
        self.burn_anchors = burn_anchors
        self.rng = rng
        self.ids = ids
        self.pool = pool
        self.eth_usd = eth_usd

        self.transfers: list[Transfer] = []
        self.funding: dict[str, FundingEdge] = {}
        self.wash_expected: dict[tuple[str, str], list[str]] = {}
        self.planted: list[PlantedEvent] = []
        self.active_nonpool: list[str] = []

        self.whale = f"WH-{name}"
        self.registry: list[tuple[str, str]] = []   # single-token holders
        self.whale_tokens: list[str] = []
        self.wash_tokens: list[str] = []
        self.pool_holdings: dict[str, list[str]] = {}
        self.wash_wallets: dict[str, str] = {}
        self.token_count = 0
        self.slot = 0
        self.cur_hour = -1
        self.wash_schedule: list[tuple[int, float]] = []  # (hour, planned ETH)
        self._pool_buys: dict[tuple[str, str], int] = {}
        self._pool_sells: set[tuple[str, str, str]] = set()

    # ---- low-level emission --------------------------------------------

    def _fresh_wallet(self) -> str:
        w = self.ids.fresh_wallet()
        self._ensure_funding(w)
        return w

    def _ensure_funding(self, wallet: str, funder: Optional[str] = None) -> None:
        if wallet not in self.funding:
            self.funding[wallet] = FundingEdge(
                wallet=wallet,
                first_funder=funder or f"F-{wallet}",
                funded_at=(EPOCH_HOUR + self.birth) * 3600 - 900,
            )

    def _new_token(self) -> str:
        t = f"{self.name}-T{self.token_count:05d}"
        self.token_count += 1
        return t

    def _ts(self, hour: int) -> int:
        if hour != self.cur_hour:
            self.cur_hour = hour
            self.slot = 0
        self.slot += 1
        return (EPOCH_HOUR + hour) * 3600 + min(self.slot * 2, 3500)

    def _emit(self, hour: int, token: str, frm: str, to: str, price_eth: float) -> Transfer:
        t = Transfer(
            tx_id=self.ids.tx(),
            timestamp=self._ts(hour),
            collection=self.name,
            token=token,
            from_wallet=frm,
            to_wallet=to,
            price_eth=price_eth,
            price_usd=round(price_eth * self.eth_usd, 6),
        )
        self.transfers.append(t)
        return t

    def _trade_price(self, level: float) -> float:
        noise = float(np.clip(self.rng.normal(0.0, _TRADE_NOISE_SD), -_TRADE_NOISE_CLIP, _TRADE_NOISE_CLIP))
        return level * math.exp(noise)

    def _pop_single(self) -> tuple[str, str]:
        if not self.registry:
            raise RuntimeError(f"{self.name}: single-holder registry exhausted")
        i = int(self.rng.integers(len(self.registry)))
        self.registry[i], self.registry[-1] = self.registry[-1], self.registry[i]
        return self.registry.pop()

    def _pool_safe(self, buyer: str, seller: str, token: str) -> bool:
        """A pool buy must not re-buy a token twice (repeat filter headroom)
        or buy back a token from the wallet it was sold to (inverted pair)."""
        if self._pool_buys.get((buyer, token), 0) >= 2:
            return False
        return (buyer, seller, token) not in self._pool_sells

    def _recirc_trade(self, hour, level, buyer=None, pool_buyer=False) -> Transfer:
        """Random single-token holder sells to a brand-new wallet (or the
        given pool wallet); owner-count neutral either way."""
        seller, token = self._pop_single()
        if pool_buyer:
            for _ in range(6):
                if self._pool_safe(buyer, seller, token):
                    break
                self.registry.append((seller, token))
                seller, token = self._pop_single()
            else:
                if not self._pool_safe(buyer, seller, token):
                    # deterministic fallback: first safe registry entry
                    self.registry.append((seller, token))
                    idx = next(
                        (i for i, (s, k) in enumerate(self.registry) if self._pool_safe(buyer, s, k)),
                        None,
                    )
                    if idx is None:
                        buyer = None  # degrade to an ordinary fresh buy
                        pool_buyer = False
                        seller, token = self._pop_single()
                    else:
                        self.registry[idx], self.registry[-1] = self.registry[-1], self.registry[idx]
                        seller, token = self.registry.pop()
        if buyer is None:
            buyer = self._fresh_wallet()
            self.active_nonpool.append(buyer)
        tr = self._emit(hour, token, seller, buyer, self._trade_price(level))
        if pool_buyer:
            self._pool_buys[(buyer, token)] = self._pool_buys.get((buyer, token), 0) + 1
            self.pool_holdings.setdefault(buyer, []).append(token)
        else:
            self.registry.append((buyer, token))
        return tr

    # ---- build phases ----------------------------------------------------

    def build(self) -> None:
        cfg = self.cfg
        plans = [
            self._plan_event(a, a in self.burn_anchors) for a in self.anchors
        ]
        self._plan_wash(plans)
        self._mint(plans)

        H = cfg.horizon_hours
        levels = np.zeros(H)
        level = float(self.rng.uniform(*cfg.base_price_range))
        pos = self.birth
        for plan in plans:
            t0 = plan.t0
            level = self._walk(levels, pos, t0 - 49, level)
            levels[t0 - 48 : t0 - 24] = level          # freeze
            levels[t0 - 24 : t0 + 1] = self._event_shape(plan, level)
            self._finalize_event(plan, levels)          # label + trade plan
            post = self._post_shape(plan, float(levels[t0]))
            levels[t0 + 1 : t0 + 25] = post
            level = float(post[-1])
            pos = t0 + 25
        self._walk(levels, pos, H - 1, level)

        self._emit_timeline(levels, plans)

        for plan in plans:
            self.planted.append(
                PlantedEvent(
                    collection=self.name,
                    t0=EPOCH_HOUR + plan.t0,
                    burn_in=plan.burn_in,
                    crash=plan.crash,
                    crash_prob=plan.crash_prob,
                    ex_post_ret=plan.ex_post_ret,
                    peak_t=plan.peak_t,
                    latents=plan.latents,
                    targets=plan.targets,
                )
            )

    def _walk(self, levels: np.ndarray, start: int, end: int, level: float) -> float:
        """Mean-reverting log walk with a hard |step| <= 0.02 clip."""
        if end < start:
            return level
        n = end - start + 1
        steps = self.rng.normal(0.0, 0.008, size=n)
        anchor = math.log(level)
        cur = anchor
        out = np.empty(n)
        for i in range(n):
            step = steps[i] - 0.02 * min(max(cur - anchor, -0.5), 0.5)
            cur += min(max(step, -_STEP_CLIP), _STEP_CLIP)
            out[i] = cur
        np.exp(out, out=out)
        levels[start : end + 1] = out
        return float(out[-1])

    def _plan_event(self, t0: int, burn: bool) -> _EventPlan:
        cfg = self.cfg
        rng = self.rng
        plan = _EventPlan(t0=t0, burn_in=burn)
        u = {f: float(rng.uniform()) for f in FEATURES}
        plan.latents = {f: 2.0 * u[f] - 1.0 for f in FEATURES}
        v_lo, v_hi = cfg.volatility_range
        to_lo, to_hi = cfg.turnover_range
        g_e = _MAX_EARLY_GROWTH - u["acceleration"] * (_MAX_EARLY_GROWTH - 1.0)
        plan.targets = {
            "zigzag": v_lo + u["volatility"] * (v_hi - v_lo),
            "turnover": to_lo + u["turnover"] * (to_hi - to_lo),
            "early_growth": g_e,
            "acceleration": _RUNUP_FACTOR - g_e,
            "soph_frac": u["sophisticated_frac"] * 0.4,
            "owner_change": plan.latents["unique_owner_change"] * cfg.owner_change_range,
            # filled by _plan_wash: wash is planted as a collection-level
            # launch burst so the cumulative feature carries no time trend
            "wash_volume_target": 0.0,
        }
        plan.peak_t = int(rng.integers(1, 4))
        return plan

    def _plan_wash(self, plans: list[_EventPlan]) -> None:
        """Most planted wash is a collection-level launch burst before the
        first event; it varies across collections but stays flat within one,
        so the cumulative wash feature carries no calendar trend."""
        if self.cfg.wash_loop_count == 0 or not plans:
            return
        u_c = float(self.rng.uniform())
        if u_c >= 0.35:
            launch = math.expm1(((u_c - 0.35) / 0.65) ** 1.3 * math.log1p(self.cfg.wash_volume_max))
            plans[0].targets["wash_volume_target"] += launch

        loop_id = 0
        prev_t0 = None
        for plan in plans:
            t0 = plan.t0
            target = plan.targets["wash_volume_target"]
            if target < 0.05:
                prev_t0 = t0
                continue
            # keep wash out of every event window so it cannot pollute the
            # ex-ante turnover or volume of the previous event
            lo = max(self.birth + 2, t0 - 120)
            if prev_t0 is not None:
                lo = max(lo, prev_t0 + 25)
            hi = t0 - 26
            if hi <= lo:
                prev_t0 = t0
                continue
            n_loops = min(self.cfg.wash_loop_count, 3)
            for _ in range(n_loops):
                hour = lo + int(self.rng.integers(0, hi - lo))
                kind = ("self_trade", "inverted_pair", "repeat_buyer", "common_funder")[loop_id % 4]
                plan.wash_loops.append(_WashLoop(hour=hour, kind=kind, target_eth=target / n_loops))
                loop_id += 1
            plan.wash_loops.sort(key=lambda wl: wl.hour)
            prev_t0 = t0

    def _wash_wallet(self, kind: str, role: int) -> str:
        key = f"{kind}:{role}"
        if key not in self.wash_wallets:
            self.wash_wallets[key] = f"WSH-{self.name}-{kind[:4].upper()}{role}"
        return self.wash_wallets[key]

    def _mint(self, plans: list[_EventPlan]) -> None:
        cfg = self.cfg
        singles = cfg.supply // 2
        whale_n = cfg.supply - singles

        all_loops = [wl for p in plans for wl in p.wash_loops]
        token_budget = 0
        wallets: set[str] = set()
        for wl in all_loops:
            token_budget += math.ceil(_WASH_TRADES_PER_LOOP / _TOKEN_CAP[wl.kind])
            wallets.add(self._wash_wallet(wl.kind, 0))
            wallets.add(self._wash_wallet(wl.kind, 1))
        token_budget = min(token_budget, 150)
        wash_wallets = sorted(wallets)
        self._total_supply = cfg.supply + token_budget + len(wash_wallets)

        h = self.birth
        for _ in range(whale_n):
            tok = self._new_token()
            self.whale_tokens.append(tok)
            self._emit(h, tok, ZERO_ADDRESS, self.whale, 0.0)
        for _ in range(singles):
            w = self._fresh_wallet()
            tok = self._new_token()
            self.registry.append((w, tok))
            self._emit(h, tok, ZERO_ADDRESS, w, 0.0)
        # keeper tokens make wash wallets permanent owners
        for w in wash_wallets:
            tok = self._new_token()
            self._emit(h, tok, ZERO_ADDRESS, w, 0.0)
        for _ in range(token_budget):
            tok = self._new_token()
            self.wash_tokens.append(tok)
            self._emit(h, tok, ZERO_ADDRESS, self.whale, 0.0)  # parked at the whale

    @property
    def total_supply(self) -> int:
        return self._total_supply

    def _event_shape(self, plan: _EventPlan, p_pre: float) -> np.ndarray:
        """Deterministic ex-ante levels for t in [-24, 0]."""
        g_e = plan.targets["early_growth"]
        g_l = _RUNUP_FACTOR / g_e
        v = plan.targets["zigzag"]
        shape = np.empty(25)
        for j in range(13):  # t = -24 .. -12, zigzag over the early growth leg
            zig = 0.0 if j in (0, 12) else (v if j % 2 == 1 else -v)
            shape[j] = p_pre * (g_e ** (j / 12.0)) * math.exp(zig)
        for j in range(13, 25):  # t = -11 .. 0, smooth late ramp
            shape[j] = p_pre * g_e * (g_l ** ((j - 12) / 12.0))
        return shape

    def _post_shape(self, plan: _EventPlan, p_anchor: float) -> np.ndarray:
        """Ex-post levels for t in [1, 24]: rise to the peak, then decay."""
        peak_mult = 1.01 + 0.04 * float(self.rng.uniform())
        end = p_anchor * (1.0 + plan.ex_post_ret)
        t_star = plan.peak_t
        peak = p_anchor * peak_mult
        shape = np.empty(24)
        for t in range(1, t_star + 1):
            shape[t - 1] = p_anchor * peak_mult ** (t / t_star)
        decay_n = 24 - t_star
        for i, t in enumerate(range(t_star + 1, 25), start=1):
            shape[t - 1] = peak * (end / peak) ** (i / decay_n)
        return shape

    def _finalize_event(self, plan: _EventPlan, levels: np.ndarray) -> None:
        """Size the wash loops, plan the trades, and draw the crash label."""
        cfg = self.cfg
        rng = self.rng
        t0 = plan.t0
        supply = self.total_supply

        # wash loops first: their planned volume feeds this event's feature
        for wl in plan.wash_loops:
            price = max(float(levels[wl.hour]), 0.05)
            n = int(min(_WASH_TRADES_PER_LOOP, max(1, round(wl.target_eth / price))))
            if wl.kind == "inverted_pair":
                n = 2 * max(1, math.ceil(n / 2))
            elif wl.kind == "repeat_buyer":
                n = 5 * max(1, math.ceil(n / 5))
            elif wl.kind == "self_trade":
                n = max(2, n)
            wl.n_trades = n
            wl.planned_vol = n * price
            self.wash_schedule.append((wl.hour, wl.planned_vol))
        cum_wash = sum(v for h, v in self.wash_schedule if h < t0)

        n_trades = max(26, int(round(plan.targets["turnover"] / 100.0 * 25 * supply)))
        if plan.burn_in:
            k_pool = len(self.pool)
            n_trades = max(n_trades, k_pool + 12)
        else:
            k_pool = min(
                int(round(plan.targets["soph_frac"] * 2 * n_trades)),
                len(self.pool),
                n_trades,
            )

        mean_exante = float(np.mean(levels[t0 - 24 : t0 + 1]))
        while n_trades * mean_exante < cfg.min_event_volume:  # volume floor
            n_trades += 8

        pool_wallets: list[str] = []
        if k_pool:
            if plan.burn_in:
                pool_wallets = list(self.pool)
            else:
                picks = sorted(rng.choice(len(self.pool), size=k_pool, replace=False).tolist())
                pool_wallets = [self.pool[i] for i in picks]
        k_pool = len(pool_wallets)

        buys: list[tuple[int, Optional[str], bool]] = []
        for i, w in enumerate(pool_wallets):
            buys.append((t0 - 23 + (i % 8), w, True))
        covered = {h for h, _, _ in buys}
        fill = [h for h in range(t0 - 24, t0 + 1) if h not in covered]
        for i in range(n_trades - k_pool):
            h = fill[i] if i < len(fill) else t0 - 24 + int(rng.integers(0, 25))
            buys.append((h, None, False))
        plan.buys = sorted(buys, key=lambda b: (b[0], b[1] or ""))

        realized_turnover = n_trades / 25.0 / supply * 100.0
        realized_frac = k_pool / (2.0 * n_trades)

        z = dict(plan.latents)
        to_lo, to_hi = cfg.turnover_range
        z["turnover"] = float(np.clip(2 * (realized_turnover - to_lo) / (to_hi - to_lo) - 1, -1.5, 1.5))
        z["sophisticated_frac"] = float(np.clip(realized_frac / 0.2 - 1.0, -1.5, 1.5))
        z["wash_volume"] = float(
            np.clip(2.0 * math.log1p(cum_wash) / math.log1p(0.5 * cfg.wash_volume_max) - 1.0, -1.0, 1.5)
        )

        effects = cfg.effects()
        if cfg.crash_prob_base <= 0.0:
            p_crash = 0.0
        elif cfg.crash_prob_base >= 1.0:
            p_crash = 1.0
        else:
            base = math.log(cfg.crash_prob_base / (1.0 - cfg.crash_prob_base))
            p_crash = _sigmoid(base + sum(effects[f] * z[f] for f in FEATURES))
        plan.crash = bool(rng.uniform() < p_crash)
        plan.crash_prob = p_crash
        plan.latents = z
        plan.targets["turnover"] = realized_turnover
        plan.targets["soph_frac"] = realized_frac
        plan.targets["wash_volume"] = cum_wash
        lo, hi = cfg.crash_ret_range if plan.crash else cfg.noncrash_ret_range
        plan.ex_post_ret = float(rng.uniform(lo, hi))

        exit_prob = 0.25 if plan.crash else 0.6  # planted ex-post liquidity gap
        for h, w, is_pool in plan.buys:
            if is_pool:
                plan.pool_sells.append((t0 + plan.peak_t, w))
            elif rng.uniform() < exit_prob:
                plan.exits.append((t0 + int(rng.integers(2, 25)), h))

    # ---- emission --------------------------------------------------------

    def _emit_timeline(self, levels: np.ndarray, plans: list[_EventPlan]) -> None:
        rng = self.rng
        H = self.cfg.horizon_hours

        buys_by_hour: dict[int, list] = {}
        sells_by_hour: dict[int, list] = {}
        exits_by_hour: dict[int, list] = {}
        wash_by_hour: dict[int, list] = {}
        owner_moves: dict[int, int] = {}
        for pi, plan in enumerate(plans):
            for h, w, is_pool in plan.buys:
                buys_by_hour.setdefault(h, []).append((pi, w, is_pool))
            for h, w in plan.pool_sells:
                sells_by_hour.setdefault(h, []).append(w)
            for h, bh in plan.exits:
                exits_by_hour.setdefault(h, []).append((pi, bh))
            for wl in plan.wash_loops:
                wash_by_hour.setdefault(wl.hour, []).append(wl)
            moves = int(round(abs(plan.targets["owner_change"]) * self.total_supply))
            sign = 1 if plan.targets["owner_change"] >= 0 else -1
            for i in range(moves):
                h = plan.t0 - 23 + (i % 24)
                owner_moves[h] = owner_moves.get(h, 0) + sign

        open_fresh: dict[tuple[int, int], list[tuple[str, str]]] = {}
        for h in range(self.birth, H):
            level = float(levels[h])
            traded = False

            for pi, w, is_pool in buys_by_hour.get(h, ()):
                tr = self._recirc_trade(h, level, buyer=w if is_pool else None, pool_buyer=is_pool)
                traded = True
                if not is_pool:
                    open_fresh.setdefault((pi, h), []).append((tr.to_wallet, tr.token))

            for w in sells_by_hour.get(h, ()):  # pool sells at the peak
                tokens = self.pool_holdings.get(w)
                if tokens:
                    tok = tokens.pop()
                    buyer = self._fresh_wallet()
                    self.active_nonpool.append(buyer)
                    self._emit(h, tok, w, buyer, self._trade_price(level))
                    self._pool_sells.add((w, buyer, tok))
                    self.registry.append((buyer, tok))
                    traded = True

            for pi, bh in exits_by_hour.get(h, ()):  # fresh-buyer exits
                lots = open_fresh.get((pi, bh))
                if not lots:
                    continue
                seller, tok = lots.pop()
                try:
                    self.registry.remove((seller, tok))
                except ValueError:
                    continue  # already recycled as a recirculation seller
                buyer = self._fresh_wallet()
                self.active_nonpool.append(buyer)
                self._emit(h, tok, seller, buyer, self._trade_price(level))
                self.registry.append((buyer, tok))
                traded = True

            for wl in wash_by_hour.get(h, ()):
                if self._emit_wash(h, level, wl):
                    traded = True

            moves = owner_moves.get(h, 0)
            if moves > 0:  # dispersion: whale hands tokens to new wallets
                for _ in range(moves):
                    if len(self.whale_tokens) <= 20:
                        break
                    tok = self.whale_tokens.pop()
                    w = self._fresh_wallet()
                    self.registry.append((w, tok))
                    self._emit(h, tok, self.whale, w, 0.0)
            elif moves < 0:  # concentration: singles hand tokens to the whale
                floor = max(40, len(self.pool) + 25)
                for _ in range(-moves):
                    if len(self.registry) <= floor:
                        break
                    seller, tok = self._pop_single()
                    self.whale_tokens.append(tok)
                    self._emit(h, tok, seller, self.whale, 0.0)

            if not traded:
                self._recirc_trade(h, level)

    def _take_wash_token(self, hour: int, owner: str) -> Optional[str]:
        """Move a parked wash token to its loop wallet via a free transfer."""
        if self.wash_tokens:
            tok = self.wash_tokens.pop()
        elif len(self.whale_tokens) > 25:
            tok = self.whale_tokens.pop()
        else:
            return None
        self._emit(hour, tok, self.whale, owner, 0.0)
        return tok

    def _emit_wash(self, h: int, level: float, wl: _WashLoop) -> bool:
        price = max(level, 0.05)
        n = wl.n_trades
        emitted = False

        if wl.kind == "self_trade":
            w = self._wash_wallet(wl.kind, 0)
            # cex funding keeps the common-funder filter off pure self trades
            self._ensure_funding(w, funder="ADDR-CEX-00")
            tok = None
            for i in range(n):
                if i % _TOKEN_CAP["self_trade"] == 0:
                    tok = self._take_wash_token(h, w)
                    if tok is None:
                        break
                tr = self._emit(h, tok, w, w, self._trade_price(price))
                self.wash_expected[(tr.tx_id, tok)] = ["self_trade"]
                emitted = True
        elif wl.kind == "inverted_pair":
            a = self._wash_wallet(wl.kind, 0)
            b = self._wash_wallet(wl.kind, 1)
            self._ensure_funding(a)
            self._ensure_funding(b)
            cycles = max(1, n // 2)
            while cycles > 0:
                tok = self._take_wash_token(h, a)
                if tok is None:
                    break
                for _ in range(min(2, cycles)):  # two round trips keep buys < 3
                    t1 = self._emit(h, tok, a, b, self._trade_price(price))
                    t2 = self._emit(h, tok, b, a, self._trade_price(price))
                    self.wash_expected[(t1.tx_id, tok)] = ["inverted_pair"]
                    self.wash_expected[(t2.tx_id, tok)] = ["inverted_pair"]
                    cycles -= 1
                    emitted = True
        elif wl.kind == "repeat_buyer":
            a = self._wash_wallet(wl.kind, 0)
            b = self._wash_wallet(wl.kind, 1)
            self._ensure_funding(a)
            self._ensure_funding(b)
            for _ in range(n // 5):
                tok = self._take_wash_token(h, a)
                if tok is None:
                    break
                for frm, to in ((a, b), (b, a), (a, b), (b, a), (a, b)):
                    tr = self._emit(h, tok, frm, to, self._trade_price(price))
                    self.wash_expected[(tr.tx_id, tok)] = ["inverted_pair", "repeat_buyer"]
                    emitted = True
        else:  # common_funder
            src = self._wash_wallet(wl.kind, 0)
            dst = self._wash_wallet(wl.kind, 1)
            self._ensure_funding(src, funder=f"WF-{self.name}")
            self._ensure_funding(dst, funder=f"WF-{self.name}")
            done = 0
            while done < n:
                tok = self._take_wash_token(h, src)
                if tok is None:
                    break
                uses = min(_TOKEN_CAP["common_funder"], n - done)
                for u in range(uses):
                    tr = self._emit(h, tok, src, dst, self._trade_price(price))
                    self.wash_expected[(tr.tx_id, tok)] = ["common_funder"]
                    done += 1
                    emitted = True
                    if u < uses - 1:
                        # free return keeps the token reusable without a buy
                        self._emit(h, tok, dst, src, 0.0)
        return emitted


def _wallet_histories(config, rng, pool, active_nonpool, eth_usd) -> list[WalletTx]:
    """Chain histories with a planted DeFi-activity gap for the pool."""
    cats = {
        "dex_swap": [f"ADDR-DEXSWAP-{i:02d}" for i in range(10)],
        "dex_liquidity": [f"ADDR-DEXLIQ-{i:02d}" for i in range(5)],
        "lending": [f"ADDR-LEND-{i:02d}" for i in range(5)],
        "other": [f"ADDR-OTHER-{i:02d}" for i in range(10)],
    }
    t_end = (EPOCH_HOUR + config.horizon_hours) * 3600
    out: list[WalletTx] = []

    def history(wallet: str, sophisticated: bool) -> None:
        if sophisticated:
            counts = {
                "dex_swap": 15 + int(rng.poisson(10)),
                "dex_liquidity": 3 + int(rng.poisson(3)),
                "lending": 4 + int(rng.poisson(4)),
                "other": 20 + int(rng.poisson(10)),
            }
            age_days = 400.0 + float(rng.uniform(0, 300))
            value_scale = 3.0
        else:
            counts = {
                "dex_swap": int(rng.poisson(1.5)),
                "dex_liquidity": int(rng.poisson(0.3)),
                "lending": int(rng.poisson(0.4)),
                "other": 4 + int(rng.poisson(4)),
            }
            age_days = 30.0 + float(rng.uniform(0, 200))
            value_scale = 0.5
        first = int(t_end - age_days * 86400)
        n_total = sum(counts.values())
        times = sorted(int(first + rng.uniform(10, age_days * 86400 - 10)) for _ in range(n_total))
        times[0] = first  # pin the wallet age
        i = 0
        for cat in ("dex_swap", "dex_liquidity", "lending", "other"):
            for _ in range(counts[cat]):
                addrs = cats[cat]
                out.append(
                    WalletTx(
                        wallet=wallet,
                        timestamp=times[i],
                        counterparty=addrs[int(rng.integers(len(addrs)))],
                        value_eth=float(value_scale * rng.lognormal(-1.0, 1.0)),
                        kind="contract_call" if cat != "other" else "transfer",
                    )
                )
                i += 1

    for w in pool:
        history(w, True)
    for w in sorted(set(active_nonpool))[: config.n_enriched_wallets]:
        history(w, False)
    out.sort(key=lambda t: (t.wallet, t.timestamp, t.counterparty))
    return out


def _assert_ground_truth(config: SynthConfig, log: TransferLog, planted: list[PlantedEvent]) -> None:
    """Re-derive anchors from the emitted trades with an in-module greedy scan
    and require exact agreement with the planted anchors."""
    look = config.detector_lookback
    w = config.detector_window
    found: set[tuple[str, int]] = set()
    for name, transfers in log.by_collection().items():
        hours = [t.hour for t in transfers]
        lo, hi = min(hours), max(hours)
        n = hi - lo + 1
        vol = np.zeros(n)
        cnt = np.zeros(n)
        for t in transfers:
            if t.is_trade:
                vol[t.hour - lo] += t.price_eth
                cnt[t.hour - lo] += 1
        price = np.full(n, np.nan)
        mask = cnt > 0
        price[mask] = vol[mask] / cnt[mask]
        last = np.nan
        for i in range(n):
            if np.isnan(price[i]):
                price[i] = last
            else:
                last = price[i]
        h = look
        while h < n:
            base, cur = price[h - look], price[h]
            if not (np.isnan(base) or np.isnan(cur)) and cur / base - 1.0 >= 1.0:
                if h - w >= 0 and h + w <= n - 1 and vol[h - w : h + w + 1].sum() >= 10.0:
                    found.add((name, lo + h))
                h += 2 * w
            else:
                h += 1
    intended = {(e.collection, e.t0) for e in planted}
    if found != intended:
        missing = sorted(intended - found)
        extra = sorted(found - intended)
        raise AssertionError(
            f"synthetic ground truth inconsistent: missing={missing[:4]} extra={extra[:4]}"
        )


def absolute_hour(local_hour: int) -> int:
    return EPOCH_HOUR + local_hour
