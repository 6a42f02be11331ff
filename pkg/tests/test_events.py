import numpy as np
import pytest

from bubblescope.events import (
    DetectorParams,
    RunUpEvent,
    aggregate_predictors,
    classify_crash,
    detect_runups,
    expost_liquidity,
)
from bubblescope.ingest import TransferLog
from bubblescope.panel import build_panel
from bubblescope.synth import SynthConfig, generate_market

from conftest import tr


def exhaustive_scan(cp, params=DetectorParams()):
    """Independent oracle: direct implementation of the three run-up
    conditions with greedy earliest-first window consumption."""
    out = []
    n = len(cp)
    h = 0
    while h < n:
        ok = False
        if h - params.lookback >= 0:
            base = cp.price[h - params.lookback]
            cur = cp.price[h]
            if base > 0 and cur > 0 and not np.isnan(base) and not np.isnan(cur):
                ok = cur / base - 1.0 >= params.runup_threshold
        if ok:
            w = params.window
            if h - w >= 0 and h + w <= n - 1:
                if cp.volume[h - w : h + w + 1].sum() >= params.min_volume_eth:
                    out.append(cp.first_hour + h)
            h += 2 * params.window
        else:
            h += 1
    return out


def panel_from_prices(prices, volume_per_hour=1.0, coll="C"):
    transfers = []
    for h, p in enumerate(prices):
        n = max(1, int(round(volume_per_hour / p))) if p > 0 else 1
        for i in range(n):
            transfers.append(
                tr(tx=f"t{h:04d}x{i}", hour=h, coll=coll, token=f"k{h}x{i}", eth=p)
            )
    return build_panel(TransferLog(transfers))


def window_event(rets_pre, rets_post, turnover=None, volume=None, crash=None, t0=500_024):
    """Hand-built RunUpEvent from 24 ex-ante and 24 ex-post hourly returns."""
    rets = np.concatenate([[np.nan], rets_pre, rets_post])
    price = np.empty(49)
    price[0] = 1.0
    for i in range(1, 49):
        price[i] = price[i - 1] * (1 + rets[i])
    ex_post = float(np.prod(1 + rets[25:]) - 1)
    return RunUpEvent(
        collection="C",
        t0=t0,
        window=24,
        price=price,
        ret=rets,
        volume=np.ones(49) if volume is None else np.asarray(volume, dtype=float),
        sales=np.ones(49),
        turnover=np.full(49, np.nan) if turnover is None else np.asarray(turnover, dtype=float),
        age0=100.0,
        cumret=price / price[0] - 1,
        volume_eth=49.0 if volume is None else float(np.sum(volume)),
        ex_post_ret=ex_post,
        crash=ex_post < -0.40 if crash is None else crash,
    )


def test_flat_path_no_events():
    pan = panel_from_prices([1.0] * 80)
    assert detect_runups(pan) == []


def test_single_runup_detected_at_jump_hour():
    prices = [1.0] * 60 + [2.1] + [2.1] * 40
    pan = panel_from_prices(prices, volume_per_hour=1.0)
    events = detect_runups(pan, DetectorParams(min_volume_eth=10.0))
    cp = pan.get("C")
    assert [e.t0 - cp.first_hour for e in events] == [60]
    assert events == sorted(events, key=lambda e: (e.collection, e.t0))
    # oracle equivalence on this path
    assert [e.t0 for e in events] == exhaustive_scan(cp)


def test_low_volume_event_dropped():
    # one trade per hour at centi-ETH prices: the run-up qualifies but the
    # window turns over far less than 10 ETH
    prices = [0.01] * 60 + [0.021] * 41
    pan = panel_from_prices(prices, volume_per_hour=0.0)
    assert detect_runups(pan, DetectorParams(min_volume_eth=10.0)) == []
    assert len(detect_runups(pan, DetectorParams(min_volume_eth=0.0))) == 1


def test_truncated_window_dropped():
    # qualifying hour too close to the sample end for a full ex-post window
    prices = [1.0] * 30 + [2.1] * 10
    pan = panel_from_prices(prices)
    assert detect_runups(pan, DetectorParams(min_volume_eth=0.0)) == []


def test_greedy_selection_consumes_window():
    # second qualifying hour 30h after the first: inside the consumed window
    prices = [1.0] * 30 + [2.2] * 30 + [5.0] * 41
    pan = panel_from_prices(prices, volume_per_hour=2.0)
    events = detect_runups(pan, DetectorParams(min_volume_eth=0.0))
    cp = pan.get("C")
    locs = [e.t0 - cp.first_hour for e in events]
    assert locs[0] == 30
    assert all(b - a >= 48 for a, b in zip(locs, locs[1:]))
    assert [e.t0 for e in events] == exhaustive_scan(cp, DetectorParams(min_volume_eth=0.0))


def test_short_collection_no_events():
    pan = panel_from_prices([1.0] * 20)
    assert detect_runups(pan) == []


def test_detector_matches_exhaustive_scan_on_synthetic(tiny_market):
    pan = build_panel(tiny_market.log)
    events = detect_runups(pan)
    expected = []
    for name in sorted(pan.collections):
        expected.extend((name, t0) for t0 in exhaustive_scan(pan.get(name)))
    assert {(e.collection, e.t0) for e in events} == set(expected)


def test_nonoverlap_invariant(small_market):
    events = detect_runups(build_panel(small_market.log))
    by_coll = {}
    for e in events:
        by_coll.setdefault(e.collection, []).append(e.t0)
    for t0s in by_coll.values():
        t0s.sort()
        assert all(b - a >= 48 for a, b in zip(t0s, t0s[1:]))


def test_classify_crash_all_zero():
    ev = window_event(np.zeros(24), np.zeros(24))
    assert classify_crash(ev) is False


def test_classify_crash_single_drop():
    post = np.zeros(24)
    post[0] = -0.50
    assert classify_crash(window_event(np.zeros(24), post)) is True


def test_classify_crash_compounds():
    # product oracle: (1-0.3)(1-0.2)-1 = -0.44 < -0.40
    post = np.zeros(24)
    post[0], post[1] = -0.30, -0.20
    ev = window_event(np.zeros(24), post)
    assert ev.ex_post_ret == pytest.approx(0.7 * 0.8 - 1)
    assert classify_crash(ev) is True
    assert classify_crash(ev, threshold=-0.45) is False


def test_threshold_monotonicity(small_market):
    events = detect_runups(build_panel(small_market.log))
    crash40 = {e.event_id for e in events if classify_crash(e, -0.40)}
    crash20 = {e.event_id for e in events if classify_crash(e, -0.20)}
    assert crash40 <= crash20


def test_label_partition(small_market):
    events = detect_runups(build_panel(small_market.log))
    for e in events:
        assert classify_crash(e) == e.crash
        assert isinstance(e.crash, bool)


def test_volatility_zero_for_constant_rets():
    ev = window_event(np.full(24, 0.05), np.zeros(24))
    row = aggregate_predictors(ev)
    # 25 window returns: NaN at t=-24 is dropped, the rest are all 0.05
    assert row.volatility == pytest.approx(0.0, abs=1e-15)


def test_volatility_alternating_matches_sample_sd_oracle():
    rets_pre = np.array([0.1 if i % 2 == 0 else -0.1 for i in range(24)])
    ev = window_event(rets_pre, np.zeros(24))
    expected = float(np.std(rets_pre, ddof=1))  # textbook sample sd, NaN excluded
    assert aggregate_predictors(ev).volatility == pytest.approx(expected)


def test_acceleration_text_variant_all_growth_late():
    # flat first half, all run-up in [-12, 0]: acceleration == cumret([-24, 0])
    rets_pre = np.zeros(24)
    rets_pre[12:] = 2.1 ** (1 / 12) - 1
    ev = window_event(rets_pre, np.zeros(24))
    row = aggregate_predictors(ev, variant="text")
    assert row.acceleration == pytest.approx(ev.cumret[24], rel=1e-9)


def test_acceleration_variants_disagree():
    rets_pre = np.full(24, 2.1 ** (1 / 24) - 1)  # smooth ramp
    ev = window_event(rets_pre, np.zeros(24))
    text = aggregate_predictors(ev, variant="text").acceleration
    caption = aggregate_predictors(ev, variant="caption").acceleration
    p = ev.price
    assert text == pytest.approx((p[24] - p[12]) / p[0])
    assert caption == pytest.approx((p[24] / p[12] - 1) - (p[24] / p[0] - 1))
    assert text != caption
    with pytest.raises(ValueError):
        aggregate_predictors(ev, variant="bogus")


def test_turnover_mean_and_age():
    to = np.full(49, np.nan)
    to[:25] = 2.0
    ev = window_event(np.zeros(24), np.zeros(24), turnover=to)
    row = aggregate_predictors(ev)
    assert row.turnover == pytest.approx(2.0)
    assert row.age_hours == 100.0


def test_turnover_absent_without_supply():
    ev = window_event(np.zeros(24), np.zeros(24))
    assert aggregate_predictors(ev).turnover is None


def test_amihud_direct_ratio():
    post = np.zeros(24)
    post[0] = -0.50
    vol = np.zeros(49)
    vol[25:] = 10.0 / 24.0
    ev = window_event(np.zeros(24), post, volume=vol)
    liq = expost_liquidity(ev)
    assert liq["amihud"] == pytest.approx(0.5 / 10.0)


def test_amihud_absent_for_zero_volume():
    ev = window_event(np.zeros(24), np.zeros(24), volume=np.zeros(49))
    assert expost_liquidity(ev)["amihud"] is None


def test_volatility_post_zero():
    ev = window_event(np.full(24, 0.02), np.zeros(24))
    assert expost_liquidity(ev)["volatility_post"] == pytest.approx(0.0)


def test_planted_crash_amihud_above_noncrash_median(small_market):
    from bubblescope.events import build_predictor_rows

    events = detect_runups(build_panel(small_market.log))
    rows = build_predictor_rows(events)
    crash_amihud = [r.amihud for r in rows if r.crash and r.amihud is not None]
    clean_amihud = [r.amihud for r in rows if not r.crash and r.amihud is not None]
    assert crash_amihud and clean_amihud
    assert np.median(crash_amihud) > np.median(clean_amihud)
