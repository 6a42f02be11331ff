import math

import numpy as np
import pytest

from bubblescope.econometrics import (
    CollinearityError,
    SeparationError,
    clustering_regressors,
    crash_regression,
    liquidity_regression,
    logit,
    market_factor_analysis,
    ols,
    timing_regression,
)
from bubblescope.events import PredictorRow
from bubblescope.ingest import TransferLog
from bubblescope.panel import build_panel

from conftest import tr


def design(n, k, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k))])
    return rng, X


def test_perfect_fit():
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x])
    res = ols(X, x.copy())
    assert res.coef("x1") == pytest.approx(1.0, abs=1e-12)
    assert res.r2 == pytest.approx(1.0, abs=1e-12)


def test_recovery_within_three_se():
    rng, X = design(1000, 1, seed=1)
    y = 2.0 + 3.0 * X[:, 1] + rng.normal(0, 0.01, 1000)
    res = ols(X, y)
    assert abs(res.beta[0] - 2.0) < 3 * res.se[0]
    assert abs(res.beta[1] - 3.0) < 3 * res.se[1]


def test_normal_equations_oracle():
    # independent oracle: explicit inverse, textbook formula
    for seed in range(20):
        rng, X = design(80 + seed, 3, seed=seed)
        y = rng.normal(size=len(X))
        res = ols(X, y)
        beta_oracle = np.linalg.inv(X.T @ X) @ (X.T @ y)
        np.testing.assert_allclose(res.beta, beta_oracle, rtol=1e-8)


def test_residual_orthogonality():
    rng, X = design(200, 4, seed=3)
    y = rng.normal(size=200)
    res = ols(X, y)
    resid = y - X @ res.beta
    assert np.max(np.abs(X.T @ resid)) / np.max(np.abs(X.T @ y)) < 1e-8


def test_r2_invariant_under_regressor_rescaling():
    rng, X = design(300, 2, seed=4)
    y = 1.0 + 0.5 * X[:, 1] - X[:, 2] + rng.normal(size=300)
    res1 = ols(X, y)
    X2 = X.copy()
    X2[:, 1] *= 10.0
    res2 = ols(X2, y)
    assert res2.r2 == pytest.approx(res1.r2, rel=1e-10)
    assert res2.beta[1] == pytest.approx(res1.beta[1] / 10.0, rel=1e-10)


def test_singleton_clusters_equal_hc1():
    rng, X = design(120, 2, seed=5)
    y = rng.normal(size=120)
    hc = ols(X, y, se_mode="hc_robust")
    cl = ols(X, y, se_mode="cluster", clusters=np.arange(120))
    # CR1 factor G/(G-1)*(n-1)/(n-k) collapses to the HC1 factor exactly
    np.testing.assert_allclose(cl.se, hc.se, rtol=1e-12)


def test_cluster_se_exceeds_plain_with_correlated_errors():
    rng = np.random.default_rng(6)
    clusters = np.repeat(np.arange(40), 10)
    shock = rng.normal(size=40)[clusters]
    x = rng.normal(size=400) + shock
    y = x + 2 * shock + rng.normal(size=400)
    X = np.column_stack([np.ones(400), x])
    plain = ols(X, y, se_mode="plain")
    cl = ols(X, y, se_mode="cluster", clusters=clusters)
    assert cl.se[1] > plain.se[1]


def test_rank_deficiency_names_columns():
    rng, X = design(50, 2, seed=7)
    X = np.column_stack([X, X[:, 1] + X[:, 2]])  # exact linear combination
    with pytest.raises(CollinearityError) as exc:
        ols(X, rng.normal(size=50), names=["intercept", "a", "b", "a_plus_b"])
    assert len(exc.value.columns) >= 1


def test_n_not_greater_than_k_error():
    with pytest.raises(ValueError):
        ols(np.ones((3, 3)), np.zeros(3))


def test_tstat_identity():
    rng, X = design(150, 2, seed=8)
    y = rng.normal(size=150)
    res = ols(X, y, se_mode="hc_robust")
    np.testing.assert_allclose(res.t, res.beta / res.se)


def test_logit_null_design():
    rng = np.random.default_rng(9)
    X = np.column_stack([np.ones(4000), rng.normal(size=4000)])
    y = (rng.uniform(size=4000) < 0.5).astype(float)
    res = logit(X, y)
    assert abs(res.beta[0]) < 0.1
    assert abs(res.beta[1]) < 0.1


def test_logit_recovers_planted_dgp():
    rng = np.random.default_rng(10)
    X = np.column_stack([np.ones(5000), rng.normal(size=5000)])
    eta = 0.5 - 1.0 * X[:, 1]
    y = (rng.uniform(size=5000) < 1 / (1 + np.exp(-eta))).astype(float)
    res = logit(X, y)
    assert abs(res.beta[0] - 0.5) < 3 * res.se[0]
    assert abs(res.beta[1] + 1.0) < 3 * res.se[1]
    assert 0.0 <= res.r2 <= 1.0


def test_logit_score_zero_at_convergence():
    rng = np.random.default_rng(11)
    X = np.column_stack([np.ones(800), rng.normal(size=800)])
    y = (rng.uniform(size=800) < 0.4).astype(float)
    res = logit(X, y)
    p = 1 / (1 + np.exp(-(X @ res.beta)))
    assert abs(np.sum(y - p)) < 1e-6


def test_logit_separation_raises():
    x = np.linspace(-2, 2, 60)
    X = np.column_stack([np.ones(60), x])
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError):
        logit(X, y)


def test_logit_requires_binary():
    with pytest.raises(ValueError):
        logit(np.ones((10, 1)), np.linspace(0, 2, 10))


# ---------------------------------------------------------------------------
# event-table regressions on fabricated rows


def fabricate_rows(n=400, seed=0, beta=None, noise=0.4):
    """Rows with a known linear-probability DGP over the seven predictors."""
    rng = np.random.default_rng(seed)
    beta = beta or {
        "volatility": 0.8,
        "turnover": -0.8,
        "acceleration": 0.8,
        "sophisticated_frac": -0.8,
        "unique_owner_change": -0.8,
        "wash_log_volume": 0.8,
    }
    rows = []
    for i in range(n):
        f = {
            "volatility": rng.uniform(0, 1),
            "turnover": rng.uniform(0, 1),
            "age_hours": rng.uniform(24, 2000),
            "acceleration": rng.uniform(0, 1),
            "sophisticated_frac": rng.uniform(0, 1),
            "unique_owner_change": rng.uniform(-1, 1),
            "wash_log_volume": rng.uniform(0, 1),
        }
        index = sum(beta.get(k, 0.0) * v for k, v in f.items()) + rng.normal(0, noise)
        crash = index > 0.4
        ex_post = -0.6 if crash else 0.1
        rows.append(
            PredictorRow(
                collection=f"C{i % 7}",
                t0=600_000 + i * 3,
                crash=bool(crash),
                ex_post_ret=ex_post + rng.normal(0, 0.02),
                volatility=f["volatility"],
                turnover=f["turnover"],
                age_hours=f["age_hours"],
                acceleration=f["acceleration"],
                sophisticated_frac=f["sophisticated_frac"],
                unique_owner_change=f["unique_owner_change"],
                wash_log_volume=f["wash_log_volume"],
                turnover_post=(0.2 if crash else 1.0) + rng.normal(0, 0.05),
                amihud=(0.3 if crash else 0.05) + 0.1 * f["wash_log_volume"] + rng.normal(0, 0.02),
                volatility_post=(0.3 if crash else 0.1) + rng.normal(0, 0.02),
            )
        )
    return rows


def test_crash_regression_recovers_signs():
    rows = fabricate_rows(n=600, seed=12)
    table = dict(crash_regression(rows, "market_plus_agent", "crash_dummy"))
    joint = table["market+agent"]
    for name, sign in [
        ("volatility", 1),
        ("turnover", -1),
        ("acceleration", 1),
        ("sophisticated_frac", -1),
        ("unique_owner_change", -1),
        ("wash_log_volume", 1),
    ]:
        assert joint.coef(name) * sign > 0, name
        assert abs(joint.tstat(name)) > 2, name
    assert joint.r2 > table["market"].r2


def test_crash_regression_market_only_columns():
    rows = fabricate_rows(n=200, seed=13)
    table = crash_regression(rows, "market_only", "crash_dummy")
    labels = [lbl for lbl, _ in table]
    assert labels == ["volatility", "turnover", "age_hours", "acceleration", "joint"]


def test_target_flip_between_crash_and_expost_return():
    # crash is (essentially) a negative threshold of ex-post return, so the
    # slopes flip sign between the two targets
    rows = fabricate_rows(n=600, seed=14)
    crash_tab = dict(crash_regression(rows, "market_plus_agent", "crash_dummy"))["market+agent"]
    ret_tab = dict(crash_regression(rows, "market_plus_agent", "ex_post_ret"))["market+agent"]
    for name in ("volatility", "sophisticated_frac", "wash_log_volume"):
        assert crash_tab.coef(name) * ret_tab.coef(name) < 0, name


def test_crash_regression_listwise_deletion():
    rows = fabricate_rows(n=80, seed=15)
    for r in rows[:10]:
        r.sophisticated_frac = None
    table = dict(crash_regression(rows, "market_plus_agent", "crash_dummy"))
    assert table["market+agent"].n == 70
    assert table["market"].n == 80


def test_low_power_flag():
    rows = fabricate_rows(n=20, seed=16)
    table = dict(crash_regression(rows, "market_only", "crash_dummy"))
    assert "low_power" in table["joint"].flags


def test_liquidity_regression_planted_links():
    rows = fabricate_rows(n=500, seed=17)
    table = dict(liquidity_regression(rows))
    assert table["turnover_post~crash_dummy"].coef("crash_dummy") < 0
    assert table["turnover_post~crash_dummy"].tstat("crash_dummy") < -2
    assert table["amihud~wash_log_volume"].coef("wash_log_volume") > 0
    assert table["amihud~wash_log_volume"].tstat("wash_log_volume") > 2
    assert len(table) == 9


def test_liquidity_regression_constant_dependent():
    rows = fabricate_rows(n=100, seed=18)
    for r in rows:
        r.volatility_post = 0.5
    table = dict(liquidity_regression(rows))
    res = table["volatility_post~crash_dummy"]
    assert res.coef("crash_dummy") == pytest.approx(0.0, abs=1e-12)
    assert res.r2 == pytest.approx(0.0, abs=1e-9)


def _timing_records(seed=0, gap=0.0, n_events=30, per_event=40):
    from bubblescope.agents import AgentEventRecord

    rng = np.random.default_rng(seed)
    records = []
    for e in range(n_events):
        soph_flags = rng.uniform(size=per_event) < 0.3
        base = rng.normal(0.5, 0.05, size=per_event)
        ranks = np.clip(base + gap * soph_flags, 0, 1)
        for i in range(per_event):
            records.append(
                AgentEventRecord(
                    wallet=f"W{e}_{i}" if not soph_flags[i] else f"S{i % 8}",
                    event=f"C@{e}",
                    collection="C",
                    t0=e,
                    profit_pct=0.0,
                    n_buys=1,
                    n_sells=1,
                    sophisticated=bool(soph_flags[i]),
                    ts_rank=float(ranks[i]),
                    ts_buy_rank=float(np.clip(base[i] + gap * soph_flags[i] / 2, 0, 1)),
                    ts_sell_rank=float(np.clip(base[i] + gap * soph_flags[i] / 2, 0, 1)),
                )
            )
    return records


def test_timing_regression_null():
    table = dict(timing_regression(_timing_records(seed=19, gap=0.0)))
    res = table["ts_rank~time_varying"]
    assert abs(res.tstat("sophisticated")) < 3


def test_timing_regression_planted_gap():
    table = dict(timing_regression(_timing_records(seed=20, gap=0.1)))
    res = table["ts_rank~time_varying"]
    assert res.coef("sophisticated") == pytest.approx(0.1, abs=0.03)
    assert res.tstat("sophisticated") > 2
    assert res.se_mode == "cluster"
    assert len(table) == 6


# ---------------------------------------------------------------------------
# market factor analysis


def _panel_two_collections(shared=True, n_hours=400, seed=21):
    rng = np.random.default_rng(seed)
    steps_a = rng.normal(0, 0.05, n_hours)
    steps_b = steps_a if shared else rng.normal(0, 0.05, n_hours)
    pa = np.exp(np.cumsum(steps_a)) * 1.0
    pb = np.exp(np.cumsum(steps_b)) * 2.0
    transfers = []
    for h in range(n_hours):
        transfers.append(tr(tx=f"a{h}", hour=h, coll="A", token=f"ka{h}", eth=float(pa[h])))
        transfers.append(tr(tx=f"b{h}", hour=h, coll="B", token=f"kb{h}", eth=float(pb[h])))
    return build_panel(TransferLog(transfers))


def test_one_factor_world():
    pan = _panel_two_collections(shared=True)
    rep = market_factor_analysis(pan, "daily")
    assert rep.mean_abs_beta == pytest.approx(1.0, abs=0.05)
    assert rep.mean_r2 == pytest.approx(1.0, abs=0.01)
    assert rep.pca_explained[0] == pytest.approx(1.0, abs=1e-6)


def test_independent_series_low_r2():
    pan = _panel_two_collections(shared=False, n_hours=2000, seed=22)
    rep = market_factor_analysis(pan, "daily")
    # each collection return correlates with the pooled factor it is part
    # of, so r2 stays well below the one-factor world
    assert rep.mean_r2 < 0.8
    assert rep.pca_explained[0] < 1.0


def test_pca_shares_non_increasing_and_bounded():
    pan = _panel_two_collections(shared=False, n_hours=900, seed=23)
    rep = market_factor_analysis(pan, "hourly")
    shares = rep.pca_explained
    assert np.all(np.diff(shares) <= 1e-12)
    assert shares.sum() <= 1.0 + 1e-9
    assert rep.top5_share <= 1.0 + 1e-9


def test_market_factor_needs_two_collections():
    transfers = [tr(tx=f"a{h}", hour=h, coll="A", token=f"k{h}") for h in range(50)]
    with pytest.raises(ValueError):
        market_factor_analysis(build_panel(TransferLog(transfers)), "daily")


def test_market_factor_weekly_frequency():
    pan = _panel_two_collections(shared=True, n_hours=24 * 7 * 30)
    rep = market_factor_analysis(pan, "weekly")
    assert rep.frequency == "weekly"
    assert rep.n_collections == 2
    with pytest.raises(ValueError):
        market_factor_analysis(pan, "monthly")


# ---------------------------------------------------------------------------
# event clustering


def _rows_at(t0s, crashes):
    return [
        PredictorRow(
            collection=f"C{i}",
            t0=t0,
            crash=c,
            ex_post_ret=-0.5 if c else 0.1,
            volatility=0.1,
            turnover=1.0,
            age_hours=100.0,
            acceleration=1.0,
        )
        for i, (t0, c) in enumerate(zip(t0s, crashes))
    ]


def test_clustering_first_event():
    rows = _rows_at([1000], [True])
    out = clustering_regressors(rows, 5)
    assert out[rows[0].event_id] == (0, None)


def test_clustering_three_prior_one_crash():
    rows = _rows_at([1000, 1010, 1020, 1030], [True, False, False, False])
    out = clustering_regressors(rows, 5)
    count, lik = out[rows[3].event_id]
    assert count == 3
    assert lik == pytest.approx(1 / 3)


def test_clustering_matches_double_loop_oracle():
    rng = np.random.default_rng(24)
    t0s = sorted(int(t) for t in rng.integers(0, 2000, size=120))
    crashes = [bool(b) for b in rng.uniform(size=120) < 0.5]
    rows = _rows_at(t0s, crashes)
    horizon = 3
    out = clustering_regressors(rows, horizon)
    span = horizon * 24
    for i, r in enumerate(rows):
        prior = [
            rows[j]
            for j in range(len(rows))
            if rows[j].t0 < r.t0 and rows[j].t0 >= r.t0 - span
        ]
        count = len(prior)
        lik = (sum(p.crash for p in prior) / count) if count else None
        got_count, got_lik = out[r.event_id]
        assert got_count == count
        if lik is None:
            assert got_lik is None
        else:
            assert got_lik == pytest.approx(lik)


def test_clustering_horizon_bounds():
    with pytest.raises(ValueError):
        clustering_regressors(_rows_at([1], [True]), 11)


def test_ols_and_logit_agree_in_sign():
    # cross-model sign check on a common fabricated event sample
    rows = fabricate_rows(n=600, seed=60)
    lpm = dict(crash_regression(rows, "market_plus_agent", "crash_dummy", estimator="ols"))
    lgt = dict(crash_regression(rows, "market_plus_agent", "crash_dummy", estimator="logit"))
    a, b = lpm["market+agent"], lgt["market+agent"]
    for name in a.names:
        if name == "intercept":
            continue
        assert a.coef(name) * b.coef(name) > 0, name
