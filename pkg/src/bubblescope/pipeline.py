"""End-to-end orchestration: ingest -> panel -> detect -> agents -> wash ->
regress -> backtest, with deterministic artifact files and a run manifest.

All stage outputs are plain CSV with repr-formatted floats, so a fixed seed
and config produce byte-identical artifacts regardless of thread count.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import agents as agents_mod
from . import backtest as backtest_mod
from . import econometrics as econ
from . import events as events_mod
from . import panel as panel_mod
from . import washtrade as wash_mod
from .events import DetectorParams, PredictorRow, RunUpEvent
from .ingest import CategoryMap, FundingIndex, TransferLog


class PipelineError(RuntimeError):
    """A stage is missing its upstream artifact or failed outright."""


# 2021-12-31T23 UTC: the paper-style year-end split between fit and trade halves
PAPER_SPLIT_HOUR = 1640991600 // 3600


@dataclass
class AnalysisConfig:
    runup_threshold: float = 1.00
    crash_threshold: float = -0.40
    min_volume_eth: float = 10.0
    lookback: int = 24
    window: int = 24
    acceleration_variant: str = "text"
    winsorize_level: float = 0.01
    min_events: int = 5
    soph_lookback: int = 5
    min_avg_profit: float = 0.25
    clustering_horizon_days: int = 5
    split_t0: Optional[int] = None      # backtest split; default = median anchor
    threads: int = 1

    def detector_params(self) -> DetectorParams:
        return DetectorParams(
            runup_threshold=self.runup_threshold,
            lookback=self.lookback,
            min_volume_eth=self.min_volume_eth,
            window=self.window,
            crash_threshold=self.crash_threshold,
            acceleration_variant=self.acceleration_variant,
        )

    def to_dict(self) -> dict:
        return {
            "runup_threshold": self.runup_threshold,
            "crash_threshold": self.crash_threshold,
            "min_volume_eth": self.min_volume_eth,
            "lookback": self.lookback,
            "window": self.window,
            "acceleration_variant": self.acceleration_variant,
            "winsorize_level": self.winsorize_level,
            "min_events": self.min_events,
            "soph_lookback": self.soph_lookback,
            "min_avg_profit": self.min_avg_profit,
            "clustering_horizon_days": self.clustering_horizon_days,
            "split_t0": self.split_t0,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        cfg = cls()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown analysis config key {k!r}")
            setattr(cfg, k, v)
        return cfg


@dataclass
class AnalysisResult:
    """In-memory results of the full analysis chain."""

    panel: panel_mod.Panel
    events: list[RunUpEvent]
    rows: list[PredictorRow]
    records: list[agents_mod.AgentEventRecord]
    flags: wash_mod.WashFlagSet
    ownership: dict[str, agents_mod.OwnershipSeries]
    ever_flagged: set[str]
    data_gaps: int
    backtest: Optional[backtest_mod.BacktestResult] = None
    persistence: Optional[agents_mod.PersistenceResult] = None
    tables: dict = field(default_factory=dict)


def analyze(
    log: TransferLog,
    config: AnalysisConfig = AnalysisConfig(),
    funding: Optional[FundingIndex] = None,
    categories: Optional[CategoryMap] = None,
    run_backtest: bool = True,
) -> AnalysisResult:
    """Run the full analysis chain on an in-memory TransferLog."""
    params = config.detector_params()
    pan = build_panel_parallel(log, config.threads)
    events = events_mod.detect_runups(pan, params, log=log)
    rows = events_mod.build_predictor_rows(events, variant=config.acceleration_variant)
    row_by_id = {r.event_id: r for r in rows}

    # agent-level: profits, sophistication, timing
    soph_params = agents_mod.SophisticationParams(
        min_events=config.min_events,
        lookback=config.soph_lookback,
        min_avg_profit=config.min_avg_profit,
    )
    event_profits = [(ev, agents_mod.event_agent_profits(ev, log)) for ev in events]
    flags = agents_mod.sophistication_flags(event_profits, soph_params)
    records: list[agents_mod.AgentEventRecord] = []
    for ev, profits in event_profits:
        if ev.crash and profits:
            agents_mod.timing_scores(ev, log, profits)
        records.extend(profits[w] for w in sorted(profits))
        row_by_id[ev.event_id].sophisticated_frac = agents_mod.sophisticated_fraction(ev, log, flags)

    ownership, gaps = agents_mod.unique_owner_series(log)
    for ev in events:
        row_by_id[ev.event_id].unique_owner_change = agents_mod.unique_owner_change(ev, ownership)

    wash_flags = wash_mod.flag_wash_trades(
        log, funding, categories.exclusion_set() if categories else set()
    )
    for ev in events:
        row_by_id[ev.event_id].wash_log_volume = wash_mod.wash_volume_before(
            ev.collection, ev.t0, wash_flags
        )

    econ.attach_clustering(rows, config.clustering_horizon_days)

    ever_flagged = {w for (eid, w), f in flags.items() if f}
    result = AnalysisResult(
        panel=pan,
        events=events,
        rows=rows,
        records=records,
        flags=wash_flags,
        ownership=ownership,
        ever_flagged=ever_flagged,
        data_gaps=gaps,
    )

    if len({r.wallet for r in records}) >= 2 and len(records) >= 4:
        try:
            result.persistence = agents_mod.profit_persistence(records)
        except ValueError:
            result.persistence = None

    if run_backtest and rows:
        t0s = sorted(r.t0 for r in rows)
        split = config.split_t0 if config.split_t0 is not None else PAPER_SPLIT_HOUR
        if not t0s[0] <= split < t0s[-1]:
            split = t0s[len(t0s) // 2]  # sample does not straddle the split
        try:
            result.backtest = backtest_mod.run_backtest(rows, split)
        except ValueError:
            result.backtest = None
    return result


def build_panel_parallel(log: TransferLog, threads: int = 1) -> panel_mod.Panel:
    """Per-collection panel build, optionally on a thread pool; the merge
    order is fixed by collection name so the output never depends on the
    pool size."""
    if threads <= 1:
        return panel_mod.build_panel(log)
    by_coll = sorted(log.by_collection().items())
    diag = panel_mod.Diagnostics()

    def one(item):
        name, transfers = item
        return name, panel_mod._build_collection(name, transfers, diag)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        built = dict(pool.map(one, by_coll))
    collections = {name: built[name] for name, _ in by_coll}
    return panel_mod.Panel(collections, diag, metadata={"threads": threads})


# ---------------------------------------------------------------------------
# file-based stage runner


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


@dataclass
class RunManifest:
    config_hash: str
    input_digests: dict
    version: str
    timings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config_hash": self.config_hash,
                "input_digests": self.input_digests,
                "version": self.version,
                "timings": self.timings,
                "diagnostics": self.diagnostics,
            },
            sort_keys=True,
            indent=1,
        )


def run_pipeline(
    out_dir: Path,
    config: AnalysisConfig,
    trades_path: Optional[Path] = None,
    funding_path: Optional[Path] = None,
    categories_path: Optional[Path] = None,
    txlog_path: Optional[Path] = None,
    synth_config=None,
) -> AnalysisResult:
    """File-based pipeline: optionally simulate, then run every stage and
    write all artifacts plus a manifest under out_dir."""
    from . import ingest as ingest_mod
    from . import synth as synth_mod

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    inputs: dict[str, str] = {}

    t0 = time.perf_counter()
    wallet_txs = None
    if synth_config is not None:
        market = synth_mod.generate_market(synth_config)
        log = market.log
        funding = market.funding
        categories = market.categories
        wallet_txs = market.wallet_txs
        sim_dir = out_dir / "sim"
        sim_dir.mkdir(exist_ok=True)
        _write_lines(sim_dir / "trades.jsonl", ingest_mod.serialize_transfers(log))
        _write_lines(sim_dir / "funding.jsonl", ingest_mod.serialize_funding(funding))
        _write_lines(sim_dir / "wallet_txs.jsonl", ingest_mod.serialize_wallet_txs(wallet_txs))
        _write_lines(
            sim_dir / "categories.csv",
            ["address,category"] + [f"{a},{c}" for a, c in categories.items()],
        )
        (sim_dir / "ground_truth.json").write_text(market.truth.to_json())
        timings["simulate"] = time.perf_counter() - t0
    else:
        if trades_path is None:
            raise PipelineError("stage ingest: no trades file and no synth config given")
        if not Path(trades_path).exists():
            raise PipelineError(f"stage ingest: trades file {trades_path} missing")
        log = ingest_mod.parse_transfers(trades_path)
        inputs["trades"] = _sha256(Path(trades_path))
        funding = None
        categories = None
        if funding_path is not None:
            funding = ingest_mod.load_funding_graph(funding_path)
            inputs["funding"] = _sha256(Path(funding_path))
        if categories_path is not None:
            categories = ingest_mod.load_categories(categories_path)
            inputs["categories"] = _sha256(Path(categories_path))
        if txlog_path is not None:
            wallet_txs = ingest_mod.parse_wallet_txs(txlog_path)
            inputs["txlog"] = _sha256(Path(txlog_path))
    timings["ingest"] = time.perf_counter() - t0

    if len(log) == 0:
        raise PipelineError("stage ingest: no valid transfer records")

    t1 = time.perf_counter()
    result = analyze(log, config, funding=funding, categories=categories)
    timings["analyze"] = time.perf_counter() - t1

    t2 = time.perf_counter()
    pan_w = panel_mod.winsorize(result.panel, config.winsorize_level)
    _write_lines(out_dir / "panel.csv", panel_mod.panel_to_csv_lines(pan_w))
    _write_lines(out_dir / "events.csv", events_mod.rows_to_csv_lines(result.rows, result.events))
    _write_lines(out_dir / "agents.csv", agents_mod.records_to_csv_lines(result.records))
    _write_lines(out_dir / "ownership.csv", agents_mod.ownership_to_csv_lines(result.ownership))
    _write_lines(out_dir / "wash_flags.csv", wash_mod.flags_to_csv_lines(result.flags))

    if result.rows:
        specs = {
            "table2_crash": lambda: econ.crash_regression(result.rows, "market_only", "crash_dummy"),
            "table6_crash": lambda: econ.crash_regression(result.rows, "market_plus_agent", "crash_dummy"),
            "table6_ret": lambda: econ.crash_regression(result.rows, "market_plus_agent", "ex_post_ret"),
            "table3_liquidity": lambda: econ.liquidity_regression(result.rows),
        }
        crash_records = [r for r in result.records if r.ts_rank is not None]
        if crash_records and len({r.event for r in crash_records}) >= 2:
            specs["table5_timing"] = lambda: econ.timing_regression(crash_records)
        tables = {}
        for name, build in specs.items():
            try:
                table = build()
            except (ValueError, econ.CollinearityError, econ.SeparationError):
                continue  # too few complete events for this specification
            tables[name] = table
            _write_lines(out_dir / f"{name}.csv", econ.table_to_csv_lines(table))
            (out_dir / f"{name}.txt").write_text(econ.table_to_text(table, name))
        result.tables = tables

    if result.backtest is not None:
        _write_lines(out_dir / "backtest_pnl.csv", backtest_mod.pnl_to_csv_lines(result.backtest))

    if len(result.panel.collections) >= 2:
        try:
            report = econ.market_factor_analysis(result.panel, "daily")
            (out_dir / "market_factors.txt").write_text(_format_market_factors(report))
        except ValueError:
            pass
    timings["write"] = time.perf_counter() - t2

    config_payload = {"analysis": config.to_dict()}
    if synth_config is not None:
        config_payload["synth"] = synth_config.to_dict()
    manifest = RunManifest(
        config_hash=hashlib.sha256(
            json.dumps(config_payload, sort_keys=True).encode()
        ).hexdigest(),
        input_digests=inputs,
        version=_package_version(),
        timings={k: round(v, 3) for k, v in timings.items()},
        diagnostics={
            "panel_conventions": result.panel.metadata,
            "parse_rejected": log.diagnostics.rejected,
            "parse_warnings": log.diagnostics.warnings,
            "ownership_data_gaps": result.data_gaps,
            "wash_missing_funding": result.flags.missing_funding,
            "n_events": len(result.events),
            "n_agent_records": len(result.records),
        },
    )
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return result


def _format_market_factors(report) -> str:
    lines = [
        f"market factor diagnostics ({report.frequency})",
        f"collections used: {report.n_collections} (dropped: {len(report.dropped)})",
        f"mean |beta| = {report.mean_abs_beta:.4f}   median |beta| = {report.median_abs_beta:.4f}",
        f"mean R2 = {report.mean_r2:.4f}   median R2 = {report.median_r2:.4f}",
        f"top-5 principal components explain {report.top5_share:.2%} of return variance",
    ]
    return "\n".join(lines) + "\n"


def _package_version() -> str:
    try:
        from importlib.metadata import version

        return version("bubblescope")
    except Exception:
        return "0.1.0"
