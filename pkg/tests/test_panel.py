import numpy as np
import pytest

from bubblescope.ingest import TransferLog
from bubblescope.panel import (
    build_panel,
    panel_from_csv_lines,
    panel_to_csv_lines,
    summary_stats,
    winsorize,
)

from conftest import H0, mint, tr


def test_mean_price_volume_sales_single_hour():
    log = TransferLog([
        tr(tx="a", hour=0, token="k1", eth=1.0),
        tr(tx="b", hour=0, token="k2", eth=3.0),
    ])
    cp = build_panel(log).get("C")
    assert cp.price[0] == 2.0
    assert cp.volume[0] == 4.0
    assert cp.sales[0] == 2


def test_carry_forward_price_and_zero_return():
    log = TransferLog([
        tr(tx="a", hour=0, token="k1", eth=2.0),
        tr(tx="b", hour=2, token="k2", eth=2.0),
    ])
    cp = build_panel(log).get("C")
    assert cp.price[1] == 2.0
    assert cp.ret[1] == 0.0
    assert cp.sales[1] == 0
    assert cp.volume[1] == 0.0


def test_turnover_mint_then_sales():
    # 10 mints, then 5 sales next hour: turnover = 5/10 = 50%
    transfers = [mint(f"m{i}", 0, "C", f"k{i}", "W", ts_offset=i) for i in range(10)]
    transfers += [tr(tx=f"s{i}", hour=1, token=f"k{i}", frm="W", to=f"B{i}", eth=1.0) for i in range(5)]
    cp = build_panel(TransferLog(transfers)).get("C")
    assert cp.supply[0] == 10
    assert cp.turnover[1] == pytest.approx(50.0)


def test_supply_cumsum_and_monotonicity():
    transfers = [mint(f"m{i}", i % 3, "C", f"k{i}", "W", ts_offset=i) for i in range(9)]
    transfers.append(tr(tx="t", hour=4, token="k0", frm="W", to="B", eth=1.0))
    cp = build_panel(TransferLog(transfers)).get("C")
    assert np.all(np.diff(cp.supply) >= 0)
    assert np.allclose(cp.supply, np.cumsum(cp.minted))


def test_volume_conservation():
    prices = [0.5, 1.25, 3.0, 0.75]
    transfers = [tr(tx=f"t{i}", hour=i, token=f"k{i}", eth=p) for i, p in enumerate(prices)]
    pan = build_panel(TransferLog(transfers))
    assert pan.get("C").volume.sum() == pytest.approx(sum(prices), abs=0)


def test_return_identity_traded_hours():
    prices = [1.0, 1.5, 1.2, 2.4, 0.6]
    transfers = [tr(tx=f"t{i}", hour=i, token=f"k{i}", eth=p) for i, p in enumerate(prices)]
    cp = build_panel(TransferLog(transfers)).get("C")
    for h in range(1, len(prices)):
        assert cp.price[h] == pytest.approx(cp.price[h - 1] * (1 + cp.ret[h]), rel=1e-12)


def test_age_increments_by_one():
    log = TransferLog([tr(tx="a", hour=0, token="k1"), tr(tx="b", hour=5, token="k2")])
    cp = build_panel(log).get("C")
    assert np.allclose(np.diff(cp.age_hours), 1.0)
    assert cp.age_hours[0] == 0.0


def test_no_mints_turnover_absent_with_warning():
    pan = build_panel(TransferLog([tr(tx="a", hour=0, token="k")]))
    assert np.isnan(pan.get("C").turnover).all()
    assert pan.diagnostics.warnings >= 1


def _panel_with_values(values):
    transfers = [tr(tx=f"t{i}", hour=i, token=f"k{i}", eth=v) for i, v in enumerate(values)]
    return build_panel(TransferLog(transfers))


def test_winsorize_order_statistic_bounds():
    # sort-based oracle: inner order statistics of 1..100 at the 1% level
    values = [float(v) for v in range(1, 101)]
    pooled = sorted(values)
    lo = pooled[int(np.ceil(0.01 * 99))]   # 2.0
    hi = pooled[int(np.floor(0.99 * 99))]  # 99.0
    pan = winsorize(_panel_with_values(values), 0.01)
    price = pan.get("C").price
    assert price.min() == pytest.approx(lo)
    assert price.max() == pytest.approx(hi)
    assert lo == 2.0 and hi == 99.0


def test_winsorize_constant_column_unchanged():
    pan = winsorize(_panel_with_values([5.0] * 120), 0.01)
    assert np.all(pan.get("C").price == 5.0)


def test_winsorize_level_zero_identity():
    pan0 = _panel_with_values([1.0, 2.0, 3.0])
    assert winsorize(pan0, 0.0) is pan0


def test_winsorize_idempotent():
    values = list(np.linspace(0.2, 40.0, 150)) + [500.0, 900.0]
    once = winsorize(_panel_with_values(values), 0.02)
    twice = winsorize(once, 0.02)
    for var in ("price", "ret", "volume"):
        np.testing.assert_array_equal(
            once.get("C").variable(var), twice.get("C").variable(var)
        )


def test_winsorize_too_few_observations_noop():
    pan = winsorize(_panel_with_values([1.0, 2.0, 3.0]), 0.01)
    assert pan.get("C").price.max() == 3.0
    assert any("left unchanged" in m for m in pan.diagnostics.messages)


def test_winsorize_bad_level():
    with pytest.raises(ValueError):
        winsorize(_panel_with_values([1.0, 2.0]), 0.7)


def test_summary_stats_single_row():
    pan = _panel_with_values([4.0])
    stats = summary_stats(pan)["price"]
    assert stats["mean"] == stats["min"] == stats["max"] == 4.0
    assert stats["sd"] == 0.0
    assert stats["n"] == 1


def test_summary_stats_planted_mean(small_market):
    pan = build_panel(small_market.log)
    stats = summary_stats(pan)
    trades = [t.price_eth for t in small_market.log.trades()]
    # carried prices are hourly means of trades, so the pooled stats must
    # stay inside the raw trade-price range
    assert stats["volume"]["n"] == len(pan)
    assert min(trades) <= stats["price"]["min"] <= stats["price"]["max"] <= max(trades)


def test_summary_stats_empty_panel_error():
    from bubblescope.panel import Panel

    with pytest.raises(ValueError):
        summary_stats(Panel({}))


def test_panel_csv_round_trip():
    log = TransferLog([
        tr(tx="a", hour=0, token="k1", eth=2.0),
        mint("m", 0, "C", "k9", "W"),
        tr(tx="b", hour=3, token="k2", eth=1.0),
    ])
    pan = build_panel(log)
    back = panel_from_csv_lines(iter(panel_to_csv_lines(pan)))
    cp0, cp1 = pan.get("C"), back.get("C")
    assert cp0.first_hour == cp1.first_hour
    np.testing.assert_allclose(cp0.price, cp1.price)
    np.testing.assert_allclose(cp0.supply, cp1.supply)
    np.testing.assert_allclose(cp0.ret, cp1.ret)
