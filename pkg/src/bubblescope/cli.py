"""bubblescope command line: stage subcommands plus a one-shot pipeline runner.

Config files are TOML with two optional tables, [synth] (generator knobs)
and [analysis] (thresholds; every paper default is overridable here so the
robustness sweeps are plain config changes).  BUBBLESCOPE_LOG controls
verbosity (DEBUG/INFO/WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python 3.10
    import tomli as tomllib

from . import agents as agents_mod
from . import backtest as backtest_mod
from . import econometrics as econ
from . import events as events_mod
from . import ingest as ingest_mod
from . import panel as panel_mod
from . import pipeline as pipeline_mod
from . import synth as synth_mod
from . import washtrade as wash_mod

log = logging.getLogger("bubblescope")


def _setup_logging() -> None:
    level = os.environ.get("BUBBLESCOPE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load_toml(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _resolve_trades(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        for candidate in (p / "trades.jsonl", p / "sim" / "trades.jsonl"):
            if candidate.exists():
                return candidate
        raise SystemExit(f"error: no trades.jsonl under {p}")
    return p


def _parse_split(text: str) -> int:
    """Accept an absolute panel hour or an ISO timestamp like 2021-12-31T23."""
    try:
        return int(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp()) // 3600


def _write_lines(path: Path, lines) -> None:
    pipeline_mod._write_lines(path, lines)


def _require(path: str, artifact: str, stage: str) -> None:
    if not path or not Path(path).exists():
        raise SystemExit(
            f"error: missing {artifact} artifact ({path!r}); run `bubblescope {stage}` first"
        )


def _analysis_config(args, toml_cfg: dict) -> pipeline_mod.AnalysisConfig:
    cfg = pipeline_mod.AnalysisConfig.from_dict(toml_cfg.get("analysis", {}))
    for name, attr in (
        ("threshold", "runup_threshold"),
        ("crash_threshold", "crash_threshold"),
        ("min_volume", "min_volume_eth"),
        ("winsorize", "winsorize_level"),
        ("threads", "threads"),
    ):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, attr, val)
    return cfg


def cmd_ingest(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tlog = ingest_mod.parse_transfers(args.trades)
    _write_lines(out / "trades.jsonl", ingest_mod.serialize_transfers(tlog))
    print(f"accepted {len(tlog)} transfers, rejected {tlog.diagnostics.rejected} lines")
    if args.funding:
        idx = ingest_mod.load_funding_graph(args.funding)
        _write_lines(out / "funding.jsonl", ingest_mod.serialize_funding(idx))
        print(f"funding edges: {len(idx)}")
    if args.categories:
        cats = ingest_mod.load_categories(args.categories)
        _write_lines(out / "categories.csv", ["address,category"] + [f"{a},{c}" for a, c in cats.items()])
        print(f"categories: {len(cats)}")
    for msg in tlog.diagnostics.messages[:20]:
        log.info(msg)
    return 0


def cmd_panel(args) -> int:
    trades = _resolve_trades(getattr(args, "in"))
    tlog = ingest_mod.parse_transfers(trades)
    pan = pipeline_mod.build_panel_parallel(tlog, args.threads or 1)
    if args.winsorize:
        pan = panel_mod.winsorize(pan, args.winsorize)
    _write_lines(Path(args.out), panel_mod.panel_to_csv_lines(pan))
    print(f"panel: {len(pan)} collection-hours over {len(pan.collections)} collections")
    if args.stats:
        print(panel_mod.summary_stats(pan).format())
    return 0


def cmd_detect(args) -> int:
    with open(args.panel) as fh:
        pan = panel_mod.panel_from_csv_lines(fh)
    cfg = pipeline_mod.AnalysisConfig(
        runup_threshold=args.threshold,
        crash_threshold=args.crash_threshold,
        min_volume_eth=args.min_volume,
        acceleration_variant=args.acceleration,
    )
    events = events_mod.detect_runups(pan, cfg.detector_params())
    rows = events_mod.build_predictor_rows(events, variant=args.acceleration)
    econ.attach_clustering(rows, cfg.clustering_horizon_days)
    _write_lines(Path(args.out), events_mod.rows_to_csv_lines(rows, events))
    n_crash = sum(1 for e in events if e.crash)
    print(f"events: {len(events)} ({n_crash} crashes)")
    return 0


def cmd_agents(args) -> int:
    _require(args.events, "events", "detect")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tlog = ingest_mod.parse_transfers(_resolve_trades(args.trades))
    with open(args.events) as fh:
        rows = events_mod.rows_from_csv_lines(fh)
    pan = panel_mod.build_panel(tlog)
    params = pipeline_mod.AnalysisConfig().detector_params()
    events = []
    for row in rows:
        try:
            ev = events_mod.materialize_event(pan.get(row.collection), row.t0, params)
        except (KeyError, ValueError) as exc:
            log.warning("skipping event %s: %s", row.event_id, exc)
            continue
        events.append(ev)

    event_profits = [(ev, agents_mod.event_agent_profits(ev, tlog)) for ev in events]
    flags = agents_mod.sophistication_flags(event_profits)
    records = []
    for ev, profits in event_profits:
        if ev.crash and profits:
            agents_mod.timing_scores(ev, tlog, profits)
        records.extend(profits[w] for w in sorted(profits))
    _write_lines(out / "agents.csv", agents_mod.records_to_csv_lines(records))

    ownership, gaps = agents_mod.unique_owner_series(tlog)
    _write_lines(out / "ownership.csv", agents_mod.ownership_to_csv_lines(ownership))
    if gaps:
        print(f"ownership data gaps: {gaps}")

    # enriched events: sophistication fraction and unique-owner change filled
    row_by_id = {r.event_id: r for r in rows}
    for ev in events:
        row = row_by_id.get(ev.event_id)
        if row is None:
            continue
        row.sophisticated_frac = agents_mod.sophisticated_fraction(ev, tlog, flags)
        row.unique_owner_change = agents_mod.unique_owner_change(ev, ownership)
    _write_lines(out / "events_enriched.csv", events_mod.rows_to_csv_lines(rows, events))

    try:
        persistence = agents_mod.profit_persistence(records)
        flag = " (low power)" if persistence.low_power else ""
        print(
            f"profit persistence AR(1): {persistence.coefficient:.4f} "
            f"(t={persistence.t_stat:.2f}, n={persistence.n_pairs}){flag}"
        )
    except ValueError:
        pass

    if args.txlog and args.categories:
        txs = ingest_mod.parse_wallet_txs(args.txlog)
        cats = ingest_mod.load_categories(args.categories)
        as_of = max((t.timestamp for t in txs), default=0)
        stats = agents_mod.enrich_wallets(txs, cats, as_of)
        agents_mod.attach_nft_stats(stats, events, tlog, records)
        ever = {r.wallet for r in records if r.sophisticated}
        if ever and len(stats) > len(ever):
            lines = ["metric,mean_sophisticated,mean_other,difference,t_stat"]
            for d in agents_mod.compare_sophisticated(stats, ever):
                lines.append(
                    f"{d.metric},{d.mean_sophisticated!r},{d.mean_other!r},{d.difference!r},{d.t_stat!r}"
                )
            _write_lines(out / "sophisticated_comparison.csv", lines)
    print(f"agent records: {len(records)}")
    return 0


def cmd_wash(args) -> int:
    tlog = ingest_mod.parse_transfers(_resolve_trades(args.trades))
    if args.benford or args.mode == "benford":
        result = wash_mod.benford_test(t.price_eth for t in tlog.trades())
        print(f"benford: chi2={result.chi2:.3f} p={result.p_value:.4f} n={result.n}")
        for digit, (obs, exp) in enumerate(zip(result.observed, result.expected), start=1):
            print(f"  digit {digit}: observed {obs:.4f} expected {exp:.4f}")
        try:
            alpha = wash_mod.powerlaw_exponent([t.price_eth for t in tlog.trades()])
            print(f"tail exponent (top decile, density convention): {alpha:.3f}")
        except ValueError as exc:
            print(f"tail exponent: {exc}")
        return 0
    funding = ingest_mod.load_funding_graph(args.funding) if args.funding else None
    exclusions = set()
    if args.exclusions:
        exclusions = ingest_mod.load_categories(args.exclusions).exclusion_set()
    flags = wash_mod.flag_wash_trades(tlog, funding, exclusions)
    _write_lines(Path(args.out), wash_mod.flags_to_csv_lines(flags))
    print(f"flagged trades: {len(flags)} (missing funding lookups: {flags.missing_funding})")
    if args.events and args.update_events:
        with open(args.events) as fh:
            rows = events_mod.rows_from_csv_lines(fh)
        for row in rows:
            row.wash_log_volume = wash_mod.wash_volume_before(row.collection, row.t0, flags)
        _write_lines(Path(args.update_events), events_mod.rows_to_csv_lines(rows))
    return 0


def cmd_regress(args) -> int:
    _require(args.events, "events", "detect")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(args.events) as fh:
        rows = events_mod.rows_from_csv_lines(fh)
    if args.market_factors:
        _require(args.market_factors, "panel", "panel")
        with open(args.market_factors) as fh:
            pan = panel_mod.panel_from_csv_lines(fh)
        from .pipeline import _format_market_factors

        report = econ.market_factor_analysis(pan, args.frequency)
        text = _format_market_factors(report)
        (out / "market_factors.txt").write_text(text)
        print(text)
    se_mode = args.se
    tables: dict[str, list] = {}
    if args.table in ("2", "all"):
        tables["table2_crash"] = econ.crash_regression(rows, "market_only", "crash_dummy", se_mode)
    if args.table in ("3", "all"):
        tables["table3_liquidity"] = econ.liquidity_regression(rows, se_mode)
    if args.table in ("6", "all"):
        tables["table6_crash"] = econ.crash_regression(rows, "market_plus_agent", "crash_dummy", se_mode)
        tables["table6_ret"] = econ.crash_regression(rows, "market_plus_agent", "ex_post_ret", se_mode)
    if args.table in ("5", "all"):
        if not args.agents:
            raise SystemExit("error: table 5 needs --agents records")
        with open(args.agents) as fh:
            records = agents_mod.records_from_csv_lines(fh)
        crash_records = [r for r in records if r.ts_rank is not None]
        tables["table5_timing"] = econ.timing_regression(crash_records)
    for name, table in tables.items():
        _write_lines(out / f"{name}.csv", econ.table_to_csv_lines(table))
        (out / f"{name}.txt").write_text(econ.table_to_text(table, name))
        print((out / f"{name}.txt").read_text())
    return 0


def cmd_backtest(args) -> int:
    _require(args.events, "events", "detect")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(args.events) as fh:
        rows = events_mod.rows_from_csv_lines(fh)
    split = _parse_split(args.split) if args.split else sorted(r.t0 for r in rows)[len(rows) // 2]
    result = backtest_mod.run_backtest(rows, split)
    _write_lines(out / "backtest_pnl.csv", backtest_mod.pnl_to_csv_lines(result))
    for run in result.runs:
        print(f"{run.model:18s} {run.portfolio:20s} trades={len(run.trades):4d} pnl={run.total_pnl():+9.2f} ETH")
    return 0


def cmd_simulate(args) -> int:
    toml_cfg = _load_toml(args.config) if args.config else {}
    cfg = synth_mod.SynthConfig.from_dict(toml_cfg.get("synth", {}))
    if args.seed is not None:
        cfg.seed = args.seed
    market = synth_mod.generate_market(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / "trades.jsonl", ingest_mod.serialize_transfers(market.log))
    _write_lines(out / "funding.jsonl", ingest_mod.serialize_funding(market.funding))
    _write_lines(out / "wallet_txs.jsonl", ingest_mod.serialize_wallet_txs(market.wallet_txs))
    _write_lines(out / "categories.csv", ["address,category"] + [f"{a},{c}" for a, c in market.categories.items()])
    (out / "ground_truth.json").write_text(market.truth.to_json())
    n_crash = sum(1 for e in market.truth.planted_events if e.crash)
    print(
        f"market: {len(market.log)} transfers, {len(market.truth.planted_events)} planted events "
        f"({n_crash} crashes), {len(market.truth.wash_expected)} wash trades"
    )
    return 0


def cmd_run(args) -> int:
    toml_cfg = _load_toml(args.config) if args.config else {}
    analysis = _analysis_config(args, toml_cfg)
    synth_cfg = None
    if "synth" in toml_cfg or args.simulate:
        synth_cfg = synth_mod.SynthConfig.from_dict(toml_cfg.get("synth", {}))
        if args.seed is not None:
            synth_cfg.seed = args.seed
    try:
        result = pipeline_mod.run_pipeline(
            Path(args.out),
            analysis,
            trades_path=Path(args.trades) if args.trades else None,
            funding_path=Path(args.funding) if args.funding else None,
            categories_path=Path(args.categories) if args.categories else None,
            txlog_path=Path(args.txlog) if args.txlog else None,
            synth_config=synth_cfg,
        )
    except pipeline_mod.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    n_crash = sum(1 for e in result.events if e.crash)
    print(f"pipeline done: {len(result.events)} events ({n_crash} crashes) -> {args.out}")
    if result.backtest is not None:
        for run in result.backtest.runs:
            print(f"  {run.model:18s} {run.portfolio:20s} pnl={run.total_pnl():+9.2f} ETH")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bubblescope", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("ingest", help="parse and normalize raw input files")
    sp.add_argument("--trades", required=True)
    sp.add_argument("--funding")
    sp.add_argument("--categories")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("panel", help="build the hourly collection panel")
    sp.add_argument("--in", dest="in", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--winsorize", type=float, default=0.0)
    sp.add_argument("--stats", action="store_true")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_panel)

    sp = sub.add_parser("detect", help="detect run-up events and label crashes")
    sp.add_argument("--panel", required=True)
    sp.add_argument("--threshold", type=float, default=1.0)
    sp.add_argument("--crash-threshold", dest="crash_threshold", type=float, default=-0.40)
    sp.add_argument("--min-volume", dest="min_volume", type=float, default=10.0)
    sp.add_argument("--acceleration", choices=["text", "caption"], default="text")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("agents", help="agent-level profits, flags, timing, ownership")
    sp.add_argument("--events", required=True)
    sp.add_argument("--trades", required=True)
    sp.add_argument("--txlog")
    sp.add_argument("--categories")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_agents)

    sp = sub.add_parser("wash", help="wash-trade filters and aggregate diagnostics")
    sp.add_argument("mode", nargs="?", choices=["benford"], help="'benford' runs the first-digit test")
    sp.add_argument("--trades", required=True)
    sp.add_argument("--funding")
    sp.add_argument("--exclusions")
    sp.add_argument("--out", default="flags.csv")
    sp.add_argument("--benford", action="store_true", help="run the first-digit test instead of flagging")
    sp.add_argument("--events", help="events CSV to enrich with the wash volume feature")
    sp.add_argument("--update-events", dest="update_events", help="where to write the enriched events CSV")
    sp.set_defaults(func=cmd_wash)

    sp = sub.add_parser("regress", help="estimate the cross-sectional tables")
    sp.add_argument("--events", required=True)
    sp.add_argument("--table", choices=["2", "3", "5", "6", "all"], default="all")
    sp.add_argument("--agents", help="agent records CSV (needed for table 5)")
    sp.add_argument("--se", choices=["plain", "hc_robust", "cluster"], default="plain")
    sp.add_argument("--market-factors", dest="market_factors", help="panel CSV for the common-factor diagnostics")
    sp.add_argument("--frequency", choices=["hourly", "daily", "weekly"], default="daily")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_regress)

    sp = sub.add_parser("backtest", help="out-of-sample two-portfolio replay")
    sp.add_argument("--events", required=True)
    sp.add_argument("--split", help="absolute hour or ISO timestamp; default median anchor")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_backtest)

    sp = sub.add_parser("simulate", help="generate a labeled synthetic market")
    sp.add_argument("--config", help="TOML file with a [synth] table")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="full pipeline (simulate/ingest ... backtest)")
    sp.add_argument("--config", help="TOML file with [synth] and/or [analysis] tables")
    sp.add_argument("--trades")
    sp.add_argument("--funding")
    sp.add_argument("--categories")
    sp.add_argument("--txlog")
    sp.add_argument("--simulate", action="store_true", help="generate inputs even without a [synth] table")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--crash-threshold", dest="crash_threshold", type=float)
    sp.add_argument("--min-volume", dest="min_volume", type=float)
    sp.add_argument("--winsorize", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_run)

    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
