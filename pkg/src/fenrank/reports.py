"""Schema-stable CSV reports over collected backtest artifacts.

All tables rescale gross returns to the configured volatility target
before computing statistics, then layer costs on top, so rows are
comparable across strategies with different natural leverage. Column
names and order are fixed; see the README for the exact schemas.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .backtest import apply_costs, compute_metrics, rescale_to_target
from .config import RunConfig
from .data import NORMAL, RISK_OFF
from .pipeline import PipelineError, _join, _write_csv, read_json

HEATMAP_ROW_SUM_TOL = 1e-9

METRICS_HEADER = [
    "strategy", "runs", "n_weeks", "ann_return", "ann_vol", "raw_ann_vol",
    "sharpe", "sharpe_std", "downside_deviation", "sortino", "max_drawdown",
    "calmar", "hit_rate", "profit_loss_ratio",
]
NDCG_HEADER = ["strategy", "runs", "ndcg_long", "ndcg_short", "ndcg_average",
               "ndcg_average_std"]
TURNOVER_HEADER = ["strategy", "runs", "mean_weekly_turnover", "turnover_std"]
SEGMENT_HEADER = [
    "model_a", "model_b", "partition", "n_weeks",
    "mean_ndcg_a", "mean_ndcg_b", "mean_return_a", "mean_return_b",
]


# ---------------------------------------------------------------------------
# heatmap aggregation


@dataclass
class HeatmapBundle:
    """Per-rebalance attention matrices with the context needed to group
    and rank them: one entry per (run, week) member."""

    week_ends: list[str]
    matrices: list[np.ndarray]
    instrument_ids: list[str]
    regimes: list[str | None]
    scores: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.matrices)

    def validate(self) -> None:
        n = len(self.instrument_ids)
        if not (len(self.week_ends) == len(self.matrices) == len(self.regimes) == len(self.scores)):
            raise PipelineError("heatmap bundle fields have mismatched lengths")
        if len(self.matrices) == 0:
            raise PipelineError("heatmap bundle is empty")
        for week, matrix in zip(self.week_ends, self.matrices):
            if matrix.shape != (n, n):
                raise PipelineError(f"heatmap for {week} is {matrix.shape}, expected ({n}, {n})")
            sums = matrix.sum(axis=1)
            if np.max(np.abs(sums - 1.0)) > HEATMAP_ROW_SUM_TOL:
                raise PipelineError(f"heatmap rows for {week} do not sum to 1: {sums}")


def aggregate_heatmaps(bundle: HeatmapBundle, group_by: str = "regime") -> dict[str, np.ndarray]:
    """Elementwise mean attention matrix per group; groups with no
    members are dropped with a warning."""
    bundle.validate()
    if group_by == "date_range":
        groups = {"all": list(range(len(bundle)))}
    elif group_by == "regime":
        groups = {NORMAL: [], RISK_OFF: []}
        for i, state in enumerate(bundle.regimes):
            if state in groups:
                groups[state].append(i)
    else:
        raise PipelineError(f"group_by must be 'regime' or 'date_range', got {group_by!r}")
    out = {}
    for name, members in groups.items():
        if not members:
            warnings.warn(f"no heatmaps in group {name!r}; omitting it", stacklevel=2)
            continue
        out[name] = np.mean([bundle.matrices[i] for i in members], axis=0)
    return out


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Column permutation by predicted rank: position 0 = lowest score.
    Ties resolve by original position, matching the signal builder."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), scores))


def column_averages(matrices: list[np.ndarray], score_lists: list[np.ndarray]) -> np.ndarray:
    """Mean attention received per predicted-rank index.

    Each member's columns are re-indexed by that week's predicted rank
    (index 0 = lowest score) before column means are taken; members then
    average elementwise.
    """
    if len(matrices) != len(score_lists) or not matrices:
        raise PipelineError("need one score vector per heatmap, at least one member")
    per_member = []
    for matrix, scores in zip(matrices, score_lists):
        order = rank_order(scores)
        per_member.append(matrix[:, order].mean(axis=0))
    return np.mean(per_member, axis=0)


# ---------------------------------------------------------------------------
# segmented returns


def segmented_returns(
    dates_a, ndcg_a, returns_a, dates_b, ndcg_b, returns_b
) -> list[dict]:
    """Partition rebalances by which model ranked better that week
    (NDCG ties go to model a) and report within-partition means."""
    dates_a = [str(d) for d in dates_a]
    dates_b = [str(d) for d in dates_b]
    if dates_a != dates_b:
        raise PipelineError("segmented returns need both models on identical rebalance dates")
    ndcg_a = np.asarray(ndcg_a, dtype=np.float64)
    ndcg_b = np.asarray(ndcg_b, dtype=np.float64)
    returns_a = np.asarray(returns_a, dtype=np.float64)
    returns_b = np.asarray(returns_b, dtype=np.float64)
    a_better = ndcg_a >= ndcg_b
    rows = []
    for name, mask in (("model_a_better", a_better), ("model_b_better", ~a_better)):
        count = int(mask.sum())
        mean = lambda v: float(v[mask].mean()) if count else None
        rows.append(
            {
                "partition": name,
                "n_weeks": count,
                "mean_ndcg_a": mean(ndcg_a),
                "mean_ndcg_b": mean(ndcg_b),
                "mean_return_a": mean(returns_a),
                "mean_return_b": mean(returns_b),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# artifact readers


def _read_series(path: str) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    out = {"week_end": [r["week_end"] for r in rows]}
    for col in ("gross", "net", "turnover", "ndcg_long", "ndcg_short", "ndcg_avg"):
        out[col] = np.array([float(r[col]) for r in rows])
    return out


def _read_scores(path: str) -> dict[str, np.ndarray]:
    by_week: dict[str, list[float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            by_week.setdefault(row["week_end"], []).append(float(row["score"]))
    return {w: np.array(v) for w, v in by_week.items()}


def _read_heatmaps(path: str, instrument_ids: list[str]) -> dict[str, np.ndarray]:
    index = {sym: i for i, sym in enumerate(instrument_ids)}
    n = len(instrument_ids)
    by_week: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            matrix = by_week.setdefault(row["week_end"], np.full((n, n), np.nan))
            matrix[index[row["row_symbol"]], index[row["col_symbol"]]] = float(row["weight"])
    for week, matrix in by_week.items():
        if np.isnan(matrix).any():
            raise PipelineError(f"heatmap for {week} in {path} is incomplete")
    return by_week


def _read_regimes(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {row["week_end"]: row["regime"] for row in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# table assembly


def _mean_opt(values) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _std_opt(values) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.std(present, ddof=1)) if len(present) >= 2 else None


def _rescaled_runs(config: RunConfig, summary: dict, strategy: str) -> list[dict]:
    """Load each run's series and rescale gross and turnover to the
    volatility target; costs are applied later, per table."""
    runs = []
    for entry in summary["strategies"][strategy]["runs"]:
        series = _read_series(_join(config, entry["series"]))
        scaled_gross, factor = rescale_to_target(series["gross"], config.sigma_target)
        runs.append(
            {
                "entry": entry,
                "week_end": series["week_end"],
                "gross": scaled_gross,
                "raw_ann_vol": float(np.std(series["gross"], ddof=1) * np.sqrt(52.0)),
                "turnover": series["turnover"] * factor,
                "ndcg_long": series["ndcg_long"],
                "ndcg_short": series["ndcg_short"],
                "ndcg_avg": series["ndcg_avg"],
            }
        )
    return runs


def _strategies(config: RunConfig) -> list[str]:
    return list(config.models) + ["one_week", "random"]


def write_main_tables(config: RunConfig) -> list[str]:
    summary = read_json(_join(config, "backtest", "manifest.json"), "backtest")
    reports_dir = _join(config, "reports")
    os.makedirs(reports_dir, exist_ok=True)
    written = []

    loaded = {name: _rescaled_runs(config, summary, name) for name in _strategies(config)}

    metrics_rows, ndcg_rows, turnover_rows = [], [], []
    for name in _strategies(config):
        runs = loaded[name]
        reports = [
            compute_metrics(r["gross"], ndcg_values=r["ndcg_avg"], turnover_values=r["turnover"])
            for r in runs
        ]
        def col(field):
            return _mean_opt([getattr(m, field) for m in reports])

        # ann_vol sits at the target by construction; raw_ann_vol is the
        # realized vol before rescaling
        metrics_rows.append(
            [name, len(runs), reports[0].n_weeks, col("ann_return"), col("ann_vol"),
             _mean_opt([r["raw_ann_vol"] for r in runs]),
             col("sharpe"), _std_opt([m.sharpe for m in reports]),
             col("downside_deviation"), col("sortino"), col("max_drawdown"),
             col("calmar"), col("hit_rate"), col("profit_loss_ratio")]
        )
        per_run_avg = [float(r["ndcg_avg"].mean()) for r in runs]
        ndcg_rows.append(
            [
                name,
                len(runs),
                _mean_opt([float(r["ndcg_long"].mean()) for r in runs]),
                _mean_opt([float(r["ndcg_short"].mean()) for r in runs]),
                _mean_opt(per_run_avg),
                _std_opt(per_run_avg),
            ]
        )
        per_run_turnover = [float(r["turnover"].mean()) for r in runs]
        turnover_rows.append(
            [name, len(runs), _mean_opt(per_run_turnover), _std_opt(per_run_turnover)]
        )

    for fname, header, rows in (
        ("metrics_table.csv", METRICS_HEADER, metrics_rows),
        ("ndcg_table.csv", NDCG_HEADER, ndcg_rows),
        ("turnover_table.csv", TURNOVER_HEADER, turnover_rows),
    ):
        path = os.path.join(reports_dir, fname)
        _write_csv(path, header, rows)
        written.append(path)

    # net Sharpe across the cost grid, one column per strategy
    cost_rows = []
    for bps in config.cost_grid_bps:
        row = [float(bps)]
        for name in _strategies(config):
            sharpes = []
            for r in loaded[name]:
                net = apply_costs(r["gross"], r["turnover"], float(bps))
                sharpes.append(compute_metrics(net).sharpe)
            row.append(_mean_opt(sharpes))
        cost_rows.append(row)
    path = os.path.join(reports_dir, "cost_sharpe_table.csv")
    _write_csv(path, ["cost_bps"] + _strategies(config), cost_rows)
    written.append(path)

    # conditional performance: fen (or first model) against the one-week heuristic
    model_a = "fen" if "fen" in config.models else config.models[0]
    model_b = "one_week"
    runs_a, runs_b = loaded[model_a], loaded[model_b]
    dates = runs_a[0]["week_end"]
    ndcg_a = np.mean([r["ndcg_avg"] for r in runs_a], axis=0)
    ret_a = np.mean([r["gross"] for r in runs_a], axis=0)
    ndcg_b = np.mean([r["ndcg_avg"] for r in runs_b], axis=0)
    ret_b = np.mean([r["gross"] for r in runs_b], axis=0)
    rows = segmented_returns(dates, ndcg_a, ret_a, runs_b[0]["week_end"], ndcg_b, ret_b)
    seg_rows = [
        [model_a, model_b, r["partition"], r["n_weeks"], r["mean_ndcg_a"],
         r["mean_ndcg_b"], r["mean_return_a"], r["mean_return_b"]]
        for r in rows
    ]
    path = os.path.join(reports_dir, "segmented_returns.csv")
    _write_csv(path, SEGMENT_HEADER, seg_rows)
    written.append(path)
    return written


def _heatmap_strategy(config: RunConfig, summary: dict) -> str | None:
    for name in _strategies(config):
        runs = summary["strategies"][name]["runs"]
        if runs and runs[0].get("heatmaps"):
            return name
    return None


def build_heatmap_bundle(config: RunConfig, summary: dict, strategy: str) -> HeatmapBundle:
    data_manifest = read_json(_join(config, "data", "manifest.json"), "prepare-data")
    instrument_ids = list(data_manifest["target_universe"])
    regimes = {}
    if data_manifest.get("regimes"):
        regimes = _read_regimes(_join(config, data_manifest["regimes"]))
    week_ends, matrices, states, score_lists = [], [], [], []
    for entry in summary["strategies"][strategy]["runs"]:
        heatmaps = _read_heatmaps(_join(config, entry["heatmaps"]), instrument_ids)
        scores = _read_scores(_join(config, entry["scores"]))
        for week in sorted(heatmaps):
            week_ends.append(week)
            matrices.append(heatmaps[week])
            states.append(regimes.get(week))
            score_lists.append(scores[week])
    return HeatmapBundle(week_ends, matrices, instrument_ids, states, score_lists)


def write_heatmap_reports(config: RunConfig) -> list[str]:
    summary = read_json(_join(config, "backtest", "manifest.json"), "backtest")
    strategy = _heatmap_strategy(config, summary)
    if strategy is None:
        warnings.warn("no strategy exported attention heatmaps; skipping heatmap reports")
        return []
    bundle = build_heatmap_bundle(config, summary, strategy)
    reports_dir = _join(config, "reports")
    os.makedirs(reports_dir, exist_ok=True)
    groups = dict(aggregate_heatmaps(bundle, group_by="date_range"))
    groups.update(aggregate_heatmaps(bundle, group_by="regime"))
    written = []
    n = len(bundle.instrument_ids)
    member_idx = {
        name: (
            list(range(len(bundle)))
            if name == "all"
            else [i for i, s in enumerate(bundle.regimes) if s == name]
        )
        for name in groups
    }
    for name, matrix in groups.items():
        path = os.path.join(reports_dir, f"heatmap_{name}.csv")
        rows = [
            [sym] + [float(w) for w in matrix[i]]
            for i, sym in enumerate(bundle.instrument_ids)
        ]
        _write_csv(path, ["symbol"] + bundle.instrument_ids, rows)
        written.append(path)
        members = member_idx[name]
        avgs = column_averages(
            [bundle.matrices[i] for i in members],
            [bundle.scores[i] for i in members],
        )
        def position(rank: int) -> str:
            if rank <= config.top_m:
                return "short"
            if rank > n - config.top_m:
                return "long"
            return "flat"
        avg_path = os.path.join(reports_dir, f"column_avg_{name}.csv")
        _write_csv(
            avg_path,
            ["rank", "mean_weight", "position"],
            [[r + 1, float(avgs[r]), position(r + 1)] for r in range(n)],
        )
        written.append(avg_path)
    return written


def write_reports(config: RunConfig) -> list[str]:
    """All report CSVs: the four tables, segmentation, and heatmaps."""
    written = write_main_tables(config)
    written.extend(write_heatmap_reports(config))
    return written
