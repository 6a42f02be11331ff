"""Regression machinery: OLS and logit with plain, HC1-robust, and one-way
cluster-robust standard errors, plus the cross-sectional tables built on
event predictor rows and the market-factor / PCA diagnostics.

Covariance conventions:
  plain    s^2 (X'X)^-1 with s^2 = RSS/(n-k)
  hc_robust  HC1: (X'X)^-1 X'diag(e^2)X (X'X)^-1 * n/(n-k)
  cluster  CR1: (X'X)^-1 [sum_g (X_g'e_g)(X_g'e_g)'] (X'X)^-1
             * G/(G-1) * (n-1)/(n-k)
With every observation its own cluster the CR1 factor G/(G-1)*(n-1)/(n-k)
collapses to n/(n-k), so singleton-cluster SEs equal HC1 SEs exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg

from .events import PredictorRow

MARKET_VARS = ["volatility", "turnover", "age_hours", "acceleration"]
AGENT_VARS = ["sophisticated_frac", "unique_owner_change", "wash_log_volume"]


class CollinearityError(ValueError):
    """Design matrix is rank deficient; names the offending columns."""

    def __init__(self, columns: list[str]):
        self.columns = columns
        super().__init__(f"collinear design columns: {', '.join(columns)}")


class SeparationError(RuntimeError):
    """Logit likelihood has no maximum (perfect separation)."""


@dataclass
class RegressionResult:
    names: list[str]
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    r2: float
    n: int
    se_mode: str
    flags: tuple[str, ...] = ()

    def coef(self, name: str) -> float:
        return float(self.beta[self.names.index(name)])

    def tstat(self, name: str) -> float:
        return float(self.t[self.names.index(name)])

    def format(self, label: str = "") -> str:
        lines = []
        if label:
            lines.append(label)
        lines.append(f"{'':18s}{'coef':>12s}{'se':>12s}{'t':>10s}")
        for i, nm in enumerate(self.names):
            lines.append(f"{nm:18s}{self.beta[i]:12.4f}{self.se[i]:12.4f}{self.t[i]:10.2f}")
        lines.append(f"R2 = {self.r2:.4f}   n = {self.n}   se = {self.se_mode}")
        if self.flags:
            lines.append("flags: " + ", ".join(self.flags))
        return "\n".join(lines)


def _check_rank(X: np.ndarray, names: Sequence[str]) -> None:
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need n > k, got n={n}, k={k}")
    _, r, p = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    if rank < k:
        bad = sorted(names[j] for j in p[rank:])
        raise CollinearityError(bad)


def ols(
    X: np.ndarray,
    y: np.ndarray,
    se_mode: str = "plain",
    clusters: Optional[Sequence] = None,
    names: Optional[Sequence[str]] = None,
) -> RegressionResult:
    """OLS via the normal equations with selectable covariance estimator.

    X must already contain the intercept column if one is wanted.  R^2 is
    centered when an all-ones column is present, uncentered otherwise.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, k = X.shape
    if names is None:
        names = [f"x{j}" for j in range(k)]
    names = list(names)
    _check_rank(X, names)

    xtx = X.T @ X
    beta = np.linalg.solve(xtx, X.T @ y)
    resid = y - X @ beta
    rss = float(resid @ resid)

    has_intercept = any(np.allclose(X[:, j], 1.0) for j in range(k))
    if has_intercept:
        tss = float(np.sum((y - y.mean()) ** 2))
    else:
        tss = float(y @ y)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0

    xtx_inv = np.linalg.inv(xtx)
    if se_mode == "plain":
        cov = xtx_inv * (rss / (n - k))
    elif se_mode == "hc_robust":
        meat = (X * (resid**2)[:, None]).T @ X
        cov = xtx_inv @ meat @ xtx_inv * (n / (n - k))
    elif se_mode == "cluster":
        if clusters is None:
            raise ValueError("cluster SE requires cluster labels")
        cov = _cluster_cov(X, resid, np.asarray(clusters), xtx_inv)
    else:
        raise ValueError(f"unknown se_mode {se_mode!r}")

    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, 0.0)
    return RegressionResult(names, beta, se, t, r2, n, se_mode)


def _cluster_cov(X: np.ndarray, resid: np.ndarray, clusters: np.ndarray, xtx_inv: np.ndarray) -> np.ndarray:
    n, k = X.shape
    labels = np.unique(clusters)
    G = len(labels)
    if G < 2:
        raise ValueError("cluster SE needs at least two clusters")
    meat = np.zeros((k, k))
    for g in labels:
        sel = clusters == g
        s = X[sel].T @ resid[sel]
        meat += np.outer(s, s)
    factor = (G / (G - 1)) * ((n - 1) / (n - k))
    return xtx_inv @ meat @ xtx_inv * factor


def logit(
    X: np.ndarray,
    y: np.ndarray,
    se_mode: str = "hc_robust",
    clusters: Optional[Sequence] = None,
    names: Optional[Sequence[str]] = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> RegressionResult:
    """Logistic regression by iteratively reweighted least squares.

    Raises SeparationError when the Newton iterates diverge, the classic
    symptom of perfectly separable data.  r2 is McFadden's pseudo-R^2.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logit requires a binary 0/1 outcome")
    n, k = X.shape
    if names is None:
        names = [f"x{j}" for j in range(k)]
    names = list(names)
    _check_rank(X, names)

    beta = np.zeros(k)
    for _ in range(max_iter):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-np.clip(eta, -30, 30)))
        grad = X.T @ (y - p)
        W = p * (1.0 - p)
        H = (X * W[:, None]).T @ X
        if np.max(np.abs(beta)) > 30.0 or not np.all(np.isfinite(beta)):
            raise SeparationError("diverging coefficients; data look separable")
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("singular Hessian; data look separable") from exc
        beta = beta + step
        if np.max(np.abs(grad)) < tol:
            break
    else:
        if np.max(np.abs(X.T @ (y - _sigmoid(X @ beta)))) > 1e-4:
            raise SeparationError("IRLS failed to converge")

    p = _sigmoid(X @ beta)
    W = p * (1.0 - p)
    H = (X * W[:, None]).T @ X
    H_inv = np.linalg.inv(H)
    if se_mode == "plain":
        cov = H_inv
    elif se_mode == "hc_robust":
        meat = (X * ((y - p) ** 2)[:, None]).T @ X
        cov = H_inv @ meat @ H_inv
    elif se_mode == "cluster":
        if clusters is None:
            raise ValueError("cluster SE requires cluster labels")
        labels = np.unique(np.asarray(clusters))
        meat = np.zeros((k, k))
        for g in labels:
            sel = np.asarray(clusters) == g
            s = X[sel].T @ (y - p)[sel]
            meat += np.outer(s, s)
        G = len(labels)
        cov = H_inv @ meat @ H_inv * (G / (G - 1))
    else:
        raise ValueError(f"unknown se_mode {se_mode!r}")

    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, 0.0)

    eps = 1e-12
    ll = float(np.sum(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))
    pbar = y.mean()
    ll0 = float(n * (pbar * math.log(pbar + eps) + (1 - pbar) * math.log(1 - pbar + eps)))
    r2 = 1.0 - ll / ll0 if ll0 != 0 else 0.0
    return RegressionResult(names, beta, se, t, r2, n, se_mode)


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(eta, -30, 30)))


# ---------------------------------------------------------------------------
# Event-table regressions


def _design(rows: list[PredictorRow], vars: list[str], target: str):
    """Listwise-complete design matrix with intercept for the given fields."""
    data, y = [], []
    for r in rows:
        vals = [getattr(r, v) for v in vars]
        if any(v is None or (isinstance(v, float) and math.isnan(v)) for v in vals):
            continue
        tv = getattr(r, target) if target != "crash_dummy" else (1.0 if r.crash else 0.0)
        if tv is None or (isinstance(tv, float) and math.isnan(tv)):
            continue
        data.append([1.0] + [float(v) for v in vals])
        y.append(float(tv))
    X = np.array(data) if data else np.empty((0, len(vars) + 1))
    return X, np.array(y), ["intercept"] + vars


LOW_POWER_N = 30


def _fit(X, y, names, se_mode, estimator="ols", clusters=None) -> RegressionResult:
    if estimator == "ols":
        res = ols(X, y, se_mode=se_mode, clusters=clusters, names=names)
    elif estimator == "logit":
        res = logit(X, y, se_mode=se_mode, clusters=clusters, names=names)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    if res.n < LOW_POWER_N:
        res.flags = res.flags + ("low_power",)
    return res


def crash_regression(
    rows: list[PredictorRow],
    spec: str = "market_only",
    target: str = "crash_dummy",
    se_mode: str = "plain",
    estimator: str = "ols",
) -> list[tuple[str, RegressionResult]]:
    """Cross-sectional crash-predictability table.

    market_only emits each aggregate predictor singly plus the joint
    specification; market_plus_agent emits the joint aggregate baseline and
    the specification augmented with the three agent-level predictors, so
    the incremental R^2 is visible side by side.
    """
    if target not in ("crash_dummy", "ex_post_ret"):
        raise ValueError(f"unknown target {target!r}")
    out: list[tuple[str, RegressionResult]] = []
    if spec == "market_only":
        for v in MARKET_VARS:
            X, y, names = _design(rows, [v], target)
            out.append((v, _fit(X, y, names, se_mode, estimator)))
        X, y, names = _design(rows, MARKET_VARS, target)
        out.append(("joint", _fit(X, y, names, se_mode, estimator)))
    elif spec == "market_plus_agent":
        X, y, names = _design(rows, MARKET_VARS, target)
        out.append(("market", _fit(X, y, names, se_mode, estimator)))
        X, y, names = _design(rows, MARKET_VARS + AGENT_VARS, target)
        out.append(("market+agent", _fit(X, y, names, se_mode, estimator)))
    else:
        raise ValueError(f"unknown spec {spec!r}")
    return out


def liquidity_regression(
    rows: list[PredictorRow], se_mode: str = "plain"
) -> list[tuple[str, RegressionResult]]:
    """Nine ex-post liquidity specifications: each liquidity outcome on each
    of crash dummy, unique-owner change, and log wash volume."""
    deps = ["turnover_post", "amihud", "volatility_post"]
    regs = ["crash_dummy", "unique_owner_change", "wash_log_volume"]
    out = []
    for reg in regs:
        for dep in deps:
            reg_field = "crash" if reg == "crash_dummy" else reg
            data, y = [], []
            for r in rows:
                dv = getattr(r, dep)
                rv = getattr(r, reg_field)
                if rv is None or dv is None:
                    continue
                if isinstance(rv, bool):
                    rv = 1.0 if rv else 0.0
                if (isinstance(dv, float) and math.isnan(dv)) or (isinstance(rv, float) and math.isnan(rv)):
                    continue
                data.append([1.0, float(rv)])
                y.append(float(dv))
            if len(data) < 3:
                continue  # regressor or outcome entirely absent from the sample
            X = np.array(data)
            out.append((f"{dep}~{reg}", _fit(X, np.array(y), ["intercept", reg], se_mode)))
    return out


def timing_regression(records: list, se_mode: str = "cluster") -> list[tuple[str, RegressionResult]]:
    """Six timing-score specifications: each TS percentile rank on the
    time-varying and the time-invariant sophistication dummy, standard
    errors clustered by event."""
    ever = {r.wallet for r in records if r.sophisticated}
    out = []
    for dummy_kind in ("time_varying", "time_invariant"):
        for metric in ("ts_rank", "ts_buy_rank", "ts_sell_rank"):
            X, y, clusters = [], [], []
            for r in records:
                d = r.sophisticated if dummy_kind == "time_varying" else (r.wallet in ever)
                X.append([1.0, 1.0 if d else 0.0])
                y.append(getattr(r, metric))
                clusters.append(r.event)
            res = _fit(
                np.array(X),
                np.array(y),
                ["intercept", "sophisticated"],
                se_mode,
                clusters=np.array(clusters),
            )
            out.append((f"{metric}~{dummy_kind}", res))
    return out


# ---------------------------------------------------------------------------
# Market factor analysis and event clustering


@dataclass
class MarketFactorReport:
    frequency: str
    betas: dict[str, float]
    r2s: dict[str, float]
    mean_abs_beta: float
    median_abs_beta: float
    mean_r2: float
    median_r2: float
    pca_explained: np.ndarray  # descending shares of positive-eigenvalue mass
    top5_share: float
    n_collections: int
    dropped: list[str] = field(default_factory=list)


_FREQ_HOURS = {"hourly": 1, "daily": 24, "weekly": 24 * 7}


def market_factor_analysis(panel, frequency: str = "daily", min_overlap: int = 10) -> MarketFactorReport:
    """Common-factor diagnostics for the panel at the chosen frequency.

    The market factor is the percentage change of the pooled mean trade
    price (all collections' trades) per period.  Collection returns are
    percentage changes of per-collection mean trade prices on adjacent
    periods; collections with fewer than min_overlap overlapping periods
    are dropped.  PCA uses a pairwise-complete covariance of the return
    matrix; explained shares are over positive-eigenvalue mass so they are
    non-increasing and sum to at most 1.
    """
    if frequency not in _FREQ_HOURS:
        raise ValueError(f"frequency must be one of {sorted(_FREQ_HOURS)}")
    bucket = _FREQ_HOURS[frequency]

    names = sorted(panel.collections)
    if len(names) < 2:
        raise ValueError("market factor analysis needs at least two collections")

    lo = min(cp.first_hour for cp in panel) // bucket
    hi = max(cp.last_hour for cp in panel) // bucket
    n_periods = hi - lo + 1

    vol = np.zeros((n_periods, len(names)))
    sal = np.zeros((n_periods, len(names)))
    for j, name in enumerate(names):
        cp = panel.get(name)
        hours = cp.first_hour + np.arange(len(cp))
        b = hours // bucket - lo
        np.add.at(vol[:, j], b, cp.volume)
        np.add.at(sal[:, j], b, cp.sales)

    with np.errstate(invalid="ignore", divide="ignore"):
        price = np.where(sal > 0, vol / np.where(sal > 0, sal, 1.0), np.nan)
        rets = price[1:] / price[:-1] - 1.0  # NaN unless both periods traded

        pooled_price = np.where(sal.sum(1) > 0, vol.sum(1) / np.where(sal.sum(1) > 0, sal.sum(1), 1.0), np.nan)
        factor = pooled_price[1:] / pooled_price[:-1] - 1.0

    betas: dict[str, float] = {}
    r2s: dict[str, float] = {}
    dropped: list[str] = []
    for j, name in enumerate(names):
        ok = ~np.isnan(rets[:, j]) & ~np.isnan(factor)
        if ok.sum() < min_overlap:
            dropped.append(name)
            continue
        X = np.column_stack([np.ones(ok.sum()), factor[ok]])
        res = ols(X, rets[ok, j], names=["intercept", "factor"])
        betas[name] = res.coef("factor")
        r2s[name] = res.r2

    kept = [names[j] for j in range(len(names)) if names[j] in betas]
    cols = [names.index(n) for n in kept]
    R = rets[:, cols]
    cov = _pairwise_cov(R)
    eig = np.linalg.eigvalsh(cov)[::-1]
    pos = np.clip(eig, 0.0, None)
    total = pos.sum()
    explained = pos / total if total > 0 else pos
    top5 = float(explained[:5].sum())

    abs_betas = np.array([abs(b) for b in betas.values()])
    r2_arr = np.array(list(r2s.values()))
    return MarketFactorReport(
        frequency=frequency,
        betas=betas,
        r2s=r2s,
        mean_abs_beta=float(abs_betas.mean()) if len(abs_betas) else float("nan"),
        median_abs_beta=float(np.median(abs_betas)) if len(abs_betas) else float("nan"),
        mean_r2=float(r2_arr.mean()) if len(r2_arr) else float("nan"),
        median_r2=float(np.median(r2_arr)) if len(r2_arr) else float("nan"),
        pca_explained=explained,
        top5_share=top5,
        n_collections=len(kept),
        dropped=dropped,
    )


def _pairwise_cov(R: np.ndarray) -> np.ndarray:
    """Covariance with pairwise-complete observations and pairwise means."""
    n, k = R.shape
    cov = np.zeros((k, k))
    masks = ~np.isnan(R)
    for i in range(k):
        for j in range(i, k):
            both = masks[:, i] & masks[:, j]
            m = both.sum()
            if m < 2:
                c = 0.0
            else:
                xi = R[both, i]
                xj = R[both, j]
                c = float(((xi - xi.mean()) * (xj - xj.mean())).sum() / (m - 1))
            cov[i, j] = cov[j, i] = c
    return cov


def clustering_regressors(rows: list[PredictorRow], horizon_days: int) -> dict[str, tuple[int, Optional[float]]]:
    """Per event: how many events (any collection) anchored in the trailing
    horizon, and the crash fraction among them (absent when none)."""
    if not 1 <= horizon_days <= 10:
        raise ValueError("horizon_days must lie in [1, 10]")
    span = horizon_days * 24
    ordered = sorted(rows, key=lambda r: (r.t0, r.collection))
    t0s = [r.t0 for r in ordered]
    crashes = [1 if r.crash else 0 for r in ordered]
    out: dict[str, tuple[int, Optional[float]]] = {}
    lo = 0
    # Sliding window over strictly earlier events with t0 in [t0-span, t0).
    for i, r in enumerate(ordered):
        while lo < i and t0s[lo] < r.t0 - span:
            lo += 1
        # events sharing this anchor hour are not "previous"; walk back over them
        j = i
        while j > lo and t0s[j - 1] == r.t0:
            j -= 1
        count = j - lo
        csum = sum(crashes[lo:j])
        out[r.event_id] = (count, (csum / count) if count else None)
    return out


def attach_clustering(rows: list[PredictorRow], horizon_days: int = 5) -> None:
    reg = clustering_regressors(rows, horizon_days)
    for r in rows:
        count, lik = reg[r.event_id]
        r.prior_runup_count = count
        r.prior_crash_likelihood = lik


def table_to_csv_lines(table: list[tuple[str, RegressionResult]]) -> Iterable[str]:
    yield "spec,term,beta,se,t,r2,n,se_mode,flags"
    for label, res in table:
        for i, nm in enumerate(res.names):
            yield ",".join(
                [
                    label,
                    nm,
                    repr(float(res.beta[i])),
                    repr(float(res.se[i])),
                    repr(float(res.t[i])),
                    repr(float(res.r2)),
                    str(res.n),
                    res.se_mode,
                    "|".join(res.flags),
                ]
            )


def table_to_text(table: list[tuple[str, RegressionResult]], title: str) -> str:
    parts = [title, "=" * len(title)]
    for label, res in table:
        parts.append("")
        parts.append(res.format(label=f"[{label}]"))
    return "\n".join(parts) + "\n"
