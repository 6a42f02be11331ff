"""bubblescope: transaction-level analytics for NFT price run-ups and crashes.

Pipeline modules: ingest -> panel -> events -> agents / washtrade ->
econometrics -> backtest, with a synthetic market generator (synth) whose
planted ground truth backs the test suite.
"""

from .backtest import BacktestResult, StrategyRun, run_backtest, run_strategy, split_fit_predict
from .econometrics import (
    CollinearityError,
    RegressionResult,
    SeparationError,
    clustering_regressors,
    crash_regression,
    liquidity_regression,
    logit,
    market_factor_analysis,
    ols,
    timing_regression,
)
from .events import DetectorParams, PredictorRow, RunUpEvent, classify_crash, detect_runups
from .ingest import (
    CategoryMap,
    FundingEdge,
    FundingIndex,
    Transfer,
    TransferLog,
    WalletTx,
    load_categories,
    load_funding_graph,
    parse_transfers,
)
from .panel import Panel, StatsTable, build_panel, summary_stats, winsorize
from .pipeline import AnalysisConfig, AnalysisResult, analyze, run_pipeline
from .synth import GroundTruth, SynthConfig, SynthConfigError, SyntheticMarket, generate_market
from .washtrade import (
    BenfordResult,
    WashFlag,
    benford_test,
    flag_wash_trades,
    powerlaw_exponent,
    wash_volume_before,
)

__version__ = "0.1.0"
