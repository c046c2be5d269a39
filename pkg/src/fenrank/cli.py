"""Command-line entry points.

Every subcommand takes ``--config`` plus optional overrides and can be
chained by hand (each stage persists manifests) or run end to end with
``run-all``. Exit status: 0 on success, 1 on a reported pipeline or
data error, 2 on usage errors (argparse).
"""

from __future__ import annotations

import argparse
import sys

from .backtest import BacktestError
from .config import RunConfigError, load_config
from .data import DataError
from .pipeline import (
    PipelineError,
    prepare_data,
    pretrain_source,
    run_all,
    run_backtests,
    run_finetune,
    train_target,
)
from .reports import write_heatmap_reports, write_reports
from .training import TrainingError

COMMANDS = (
    "prepare-data",
    "pretrain-source",
    "train-target",
    "finetune",
    "backtest",
    "report",
    "heatmaps",
    "negative-transfer",
    "run-all",
)

_HELP = {
    "prepare-data": "build weekly ranking samples and regime labels from price CSVs",
    "pretrain-source": "train the pool of source rankers and their selection backtests",
    "train-target": "select source runs and train target models (frozen source)",
    "finetune": "unfreeze and fine-tune two-stage models at the minimum learning rate",
    "backtest": "score test weeks and simulate the long/short portfolio",
    "report": "write all report CSVs from collected artifacts",
    "heatmaps": "write aggregated attention heatmap CSVs only",
    "negative-transfer": "run the full pipeline with worst-2 source selection",
    "run-all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fenrank",
        description="Transfer-ranking momentum pipeline: train, backtest, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=_HELP[name])
        cmd.add_argument("--config", required=True, help="path to the JSON run config")
        cmd.add_argument("--seed", type=int, default=None, help="override master seed")
        cmd.add_argument("--runs", type=int, default=None,
                         help="independent runs per stage (default 10 from config)")
        cmd.add_argument("--cost-bps", type=float, default=None,
                         help="headline transaction cost in basis points")
        cmd.add_argument("--top-m", type=int, default=None,
                         help="instruments per side of the book (default 2)")
        cmd.add_argument("--vol-target", type=float, default=None,
                         help="annualized volatility target (default 0.15)")
        cmd.add_argument("--mode", choices=("best", "worst"), default=None,
                         help="source selection mode")
        cmd.add_argument("--workers", type=int, default=None,
                         help="parallel workers for independent runs")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "master_seed": args.seed,
        "runs": args.runs,
        "headline_cost_bps": args.cost_bps,
        "top_m": args.top_m,
        "sigma_target": args.vol_target,
        "mode": args.mode,
        "workers": args.workers,
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = _overrides(args)
    if args.command == "negative-transfer":
        overrides["mode"] = "worst"
    dispatch = {
        "prepare-data": prepare_data,
        "pretrain-source": pretrain_source,
        "train-target": train_target,
        "finetune": run_finetune,
        "backtest": run_backtests,
        "report": write_reports,
        "heatmaps": write_heatmap_reports,
        "negative-transfer": run_all,
        "run-all": run_all,
    }
    try:
        config = load_config(args.config, overrides)
        dispatch[args.command](config)
    except (RunConfigError, PipelineError, DataError, TrainingError, BacktestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
