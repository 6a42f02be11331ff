"""Out-of-sample crash-prediction replay: fit on the early events, trade the
late ones with two median-threshold portfolios per model.

For each model the training-sample median of the fitted crash probabilities
splits the scored test events: strictly below the median buys into the
"predicted noncrash" portfolio, at or above it into "predicted crash"
(ties go to the crash side).  Each trade invests 1 ETH at the carried price
at t=1 and liquidates at t=24.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .econometrics import AGENT_VARS, MARKET_VARS, RegressionResult, ols
from .events import PredictorRow

MODELS = ("market_only", "market_plus_agent")
PORTFOLIOS = ("predicted_noncrash", "predicted_crash")


@dataclass
class TradeLine:
    event_id: str
    collection: str
    t0: int
    entry_price: float
    exit_price: float
    pnl_eth: float


@dataclass
class StrategyRun:
    model: str
    portfolio: str
    trades: list[TradeLine] = field(default_factory=list)

    def cum_pnl(self) -> np.ndarray:
        return np.cumsum([t.pnl_eth for t in self.trades]) if self.trades else np.array([])

    def total_pnl(self) -> float:
        return float(sum(t.pnl_eth for t in self.trades))


@dataclass
class ModelPredictions:
    model: str
    fit: RegressionResult
    train_median: float
    scores: dict[str, float]          # test event id -> predicted crash probability


@dataclass
class BacktestResult:
    predictions: dict[str, ModelPredictions]
    runs: list[StrategyRun]
    skipped: list[str] = field(default_factory=list)

    def run(self, model: str, portfolio: str) -> StrategyRun:
        for r in self.runs:
            if r.model == model and r.portfolio == portfolio:
                return r
        raise KeyError((model, portfolio))

    def wedge(self, model: str) -> float:
        """Noncrash total PnL minus crash total PnL for one model."""
        return self.run(model, "predicted_noncrash").total_pnl() - self.run(
            model, "predicted_crash"
        ).total_pnl()


def _model_vars(model: str) -> list[str]:
    if model == "market_only":
        return list(MARKET_VARS)
    if model == "market_plus_agent":
        return list(MARKET_VARS) + list(AGENT_VARS)
    raise ValueError(f"unknown model {model!r}")


def _complete(row: PredictorRow, vars: list[str]) -> Optional[list[float]]:
    vals = []
    for v in vars:
        x = getattr(row, v)
        if x is None or (isinstance(x, float) and math.isnan(x)):
            return None
        vals.append(float(x))
    return vals


def split_fit_predict(rows: list[PredictorRow], split_t0: int) -> dict[str, ModelPredictions]:
    """Fit the crash-dummy linear model per specification on events anchored
    at or before split_t0; score the later events.

    A model without enough complete training rows (for instance the agent
    specification on events that never got agent features) is skipped; at
    least one model must be fittable.
    """
    train = [r for r in rows if r.t0 <= split_t0]
    test = [r for r in rows if r.t0 > split_t0]
    if not train or not test:
        raise ValueError("both sides of the split must be non-empty")

    out: dict[str, ModelPredictions] = {}
    for model in MODELS:
        vars = _model_vars(model)
        X, y = [], []
        for r in train:
            vals = _complete(r, vars)
            if vals is not None:
                X.append([1.0] + vals)
                y.append(1.0 if r.crash else 0.0)
        if len(X) <= len(vars) + 1:
            continue
        fit = ols(np.array(X), np.array(y), names=["intercept"] + vars)
        fitted = np.array(X) @ fit.beta
        median = float(np.median(fitted))
        scores: dict[str, float] = {}
        for r in sorted(test, key=lambda r: (r.t0, r.collection)):
            vals = _complete(r, vars)
            if vals is None:
                continue
            scores[r.event_id] = float(np.dot([1.0] + vals, fit.beta))
        out[model] = ModelPredictions(model=model, fit=fit, train_median=median, scores=scores)
    if not out:
        raise ValueError("no model specification has enough complete training events")
    return out


def run_strategy(
    predictions: dict[str, ModelPredictions], rows: list[PredictorRow]
) -> BacktestResult:
    """Build the four calendar-time portfolios from the model scores."""
    by_id = {r.event_id: r for r in rows}
    runs = []
    skipped: list[str] = []
    for model in sorted(predictions):
        preds = predictions[model]
        folios = {p: StrategyRun(model=model, portfolio=p) for p in PORTFOLIOS}
        for event_id in sorted(
            preds.scores, key=lambda eid: (by_id[eid].t0, by_id[eid].collection)
        ):
            row = by_id[event_id]
            if (
                row.entry_price is None
                or row.exit_price is None
                or not (isinstance(row.entry_price, float) and row.entry_price > 0)
            ):
                skipped.append(event_id)
                continue
            score = preds.scores[event_id]
            side = "predicted_noncrash" if score < preds.train_median else "predicted_crash"
            pnl = row.exit_price / row.entry_price - 1.0
            folios[side].trades.append(
                TradeLine(
                    event_id=event_id,
                    collection=row.collection,
                    t0=row.t0,
                    entry_price=row.entry_price,
                    exit_price=row.exit_price,
                    pnl_eth=pnl,
                )
            )
        runs.extend([folios[p] for p in PORTFOLIOS])
    return BacktestResult(predictions=predictions, runs=runs, skipped=skipped)


def run_backtest(rows: list[PredictorRow], split_t0: int) -> BacktestResult:
    return run_strategy(split_fit_predict(rows, split_t0), rows)


def pnl_to_csv_lines(result: BacktestResult) -> Iterator[str]:
    yield "model,portfolio,collection,t0,entry_price,exit_price,pnl_eth,cum_pnl_eth"
    for run in result.runs:
        cum = 0.0
        for t in run.trades:
            cum += t.pnl_eth
            yield ",".join(
                [
                    run.model,
                    run.portfolio,
                    t.collection,
                    str(t.t0),
                    repr(t.entry_price),
                    repr(t.exit_price),
                    repr(t.pnl_eth),
                    repr(cum),
                ]
            )
