"""Volatility-targeted long/short backtest and performance analytics.

Positions are +-1/0 signals scaled per instrument by sigma_tgt/sigma_i.
Weekly portfolio return, turnover, proportional transaction costs, and
the summary metric suite (annualized return/vol, Sharpe, Sortino,
Calmar, downside deviation, max drawdown, hit rate, profit/loss ratio)
are all computed from weekly observations with a sqrt(52) annualization.
Signals formed at week t are paid the week t -> t+1 return; the first
week's turnover is measured against an all-zero book (entry costs are
real costs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .ranking import average_ndcg_at_k, scores_to_signal

SIGMA_TARGET = 0.15
WEEKS_PER_YEAR = 52
MIN_METRIC_WEEKS = 8


class BacktestError(ValueError):
    """Raised for misaligned inputs or degenerate series."""


@dataclass
class BacktestSeries:
    dates: np.ndarray        # datetime64[D], ascending
    gross: np.ndarray        # weekly portfolio returns before costs
    net: np.ndarray          # gross - cost_rate * turnover
    turnover: np.ndarray
    positions: np.ndarray    # weeks x instruments, vol-scaled holdings
    instrument_ids: list[str]
    ndcg: np.ndarray         # per-week mean of long/short NDCG@top_m
    cost_bps: float

    def __len__(self):
        return len(self.dates)


@dataclass
class MetricReport:
    n_weeks: int
    ann_return: float
    ann_vol: float
    sharpe: float
    downside_deviation: float
    sortino: float | None
    max_drawdown: float
    calmar: float | None
    hit_rate: float
    profit_loss_ratio: float | None
    mean_ndcg: float | None = None
    mean_turnover: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def csm_return(
    signals: np.ndarray,
    vols: np.ndarray,
    next_returns: np.ndarray,
    sigma_tgt: float = SIGMA_TARGET,
) -> float:
    """One week of cross-sectional momentum return:
    (1/n) sum_i S_i * (sigma_tgt / sigma_i) * r_i."""
    signals = np.asarray(signals, dtype=np.float64)
    vols = np.asarray(vols, dtype=np.float64)
    next_returns = np.asarray(next_returns, dtype=np.float64)
    if not (signals.shape == vols.shape == next_returns.shape):
        raise BacktestError(
            f"misaligned inputs: {signals.shape}, {vols.shape}, {next_returns.shape}"
        )
    if (vols <= 0).any():
        raise BacktestError("volatilities must be strictly positive (is the floor applied?)")
    return float((signals * (sigma_tgt / vols) * next_returns).mean())


def scaled_positions(signals, vols, sigma_tgt: float = SIGMA_TARGET) -> np.ndarray:
    """Per-instrument holdings after volatility scaling: S_i * sigma_tgt/sigma_i."""
    signals = np.asarray(signals, dtype=np.float64)
    vols = np.asarray(vols, dtype=np.float64)
    if (vols <= 0).any():
        raise BacktestError("volatilities must be strictly positive")
    return signals * (sigma_tgt / vols)


def turnover(
    signals_t,
    signals_prev,
    vols_t,
    vols_prev,
    sigma_tgt: float = SIGMA_TARGET,
) -> float:
    """Weekly turnover sigma_tgt * sum_i |S_t/sigma_t - S_{t-1}/sigma_{t-1}|.

    Pass all-zero previous signals for the first week (with any positive
    vols) so position establishment is counted.
    """
    s_t = np.asarray(signals_t, dtype=np.float64)
    s_p = np.asarray(signals_prev, dtype=np.float64)
    v_t = np.asarray(vols_t, dtype=np.float64)
    v_p = np.asarray(vols_prev, dtype=np.float64)
    if not (s_t.shape == s_p.shape == v_t.shape == v_p.shape):
        raise BacktestError("misaligned turnover inputs")
    return float(sigma_tgt * np.abs(s_t / v_t - s_p / v_p).sum())


def apply_costs(gross: np.ndarray, turnover_series: np.ndarray, cost_bps: float) -> np.ndarray:
    """net_t = gross_t - (cost_bps / 10^4) * turnover_t."""
    if cost_bps < 0:
        raise BacktestError(f"cost_bps must be >= 0, got {cost_bps}")
    gross = np.asarray(gross, dtype=np.float64)
    turnover_series = np.asarray(turnover_series, dtype=np.float64)
    if gross.shape != turnover_series.shape:
        raise BacktestError("gross and turnover must align")
    return gross - (cost_bps / 1e4) * turnover_series


def rescale_to_target(returns: np.ndarray, sigma_tgt: float = SIGMA_TARGET) -> tuple[np.ndarray, float]:
    """Scale a weekly return series so its full-sample annualized std is
    exactly sigma_tgt. Returns the scaled series and the factor."""
    returns = np.asarray(returns, dtype=np.float64)
    realized = float(np.std(returns, ddof=1)) * np.sqrt(WEEKS_PER_YEAR)
    # summing float64 rounding noise makes a constant series' std ~1e-18, not 0
    if realized < 1e-12 or not np.isfinite(realized):
        raise BacktestError("cannot rescale a series with zero or undefined std")
    factor = sigma_tgt / realized
    return returns * factor, factor


def max_drawdown(returns: np.ndarray) -> float:
    """Largest peak-to-trough decline of the compounded equity curve."""
    equity = np.cumprod(1.0 + np.asarray(returns, dtype=np.float64))
    peaks = np.maximum.accumulate(np.concatenate([[1.0], equity]))[1:]
    return float((1.0 - equity / peaks).max())


def compute_metrics(
    returns: np.ndarray,
    ndcg_values: np.ndarray | None = None,
    turnover_values: np.ndarray | None = None,
) -> MetricReport:
    """Summary statistics of a weekly return series (>= 8 observations).

    Ratios with an undefined denominator (Calmar with zero drawdown,
    Sortino with zero downside deviation, profit/loss with no winning or
    no losing weeks) are reported as absent rather than infinite.
    """
    r = np.asarray(returns, dtype=np.float64)
    if r.size < MIN_METRIC_WEEKS:
        raise BacktestError(f"need at least {MIN_METRIC_WEEKS} weekly observations, got {r.size}")
    ann_return = float(r.mean()) * WEEKS_PER_YEAR
    ann_vol = float(r.std(ddof=1)) * np.sqrt(WEEKS_PER_YEAR)
    sharpe = ann_return / ann_vol if ann_vol > 0 else 0.0
    downside = float(np.sqrt(WEEKS_PER_YEAR * np.mean(np.minimum(r, 0.0) ** 2)))
    sortino = ann_return / downside if downside > 0 else None
    mdd = max_drawdown(r)
    calmar = ann_return / mdd if mdd > 0 else None
    hit_rate = float((r > 0).mean())
    wins = r[r > 0]
    losses = r[r < 0]
    pl_ratio = float(wins.mean() / abs(losses.mean())) if wins.size and losses.size else None
    return MetricReport(
        n_weeks=int(r.size),
        ann_return=ann_return,
        ann_vol=ann_vol,
        sharpe=sharpe,
        downside_deviation=downside,
        sortino=sortino,
        max_drawdown=mdd,
        calmar=calmar,
        hit_rate=hit_rate,
        profit_loss_ratio=pl_ratio,
        mean_ndcg=float(np.mean(ndcg_values)) if ndcg_values is not None and len(ndcg_values) else None,
        mean_turnover=float(np.mean(turnover_values)) if turnover_values is not None and len(turnover_values) else None,
    )


def run_backtest(
    dataset: Dataset,
    scores_by_week: dict,
    top_m: int = 2,
    sigma_tgt: float = SIGMA_TARGET,
    cost_bps: float = 0.0,
) -> BacktestSeries:
    """Score -> signal -> return -> turnover, one pass over the weeks.

    ``scores_by_week`` maps each sample's date (as str or datetime64) to
    its score vector; every week in ``dataset`` must be present. Week-t
    positions are paid week t -> t+1 returns (already aligned inside the
    samples), so the pass never looks ahead.
    """
    if len(dataset) == 0:
        raise BacktestError("empty dataset")
    keyed = {str(np.datetime64(k, "D")): v for k, v in scores_by_week.items()}
    missing = [str(s.date) for s in dataset if str(s.date) not in keyed]
    if missing:
        raise BacktestError(f"missing scores for weeks: {', '.join(missing)}")
    dates, gross, turns, ndcgs, pos_rows = [], [], [], [], []
    prev_signal = prev_vols = None
    ids = dataset[0].instrument_ids
    for s in dataset:
        if s.instrument_ids != ids:
            raise BacktestError(f"universe changed at {s.date}")
        scores = np.asarray(keyed[str(s.date)], dtype=np.float64).reshape(-1)
        if scores.size != s.n:
            raise BacktestError(f"score length {scores.size} != universe size {s.n} at {s.date}")
        signal = scores_to_signal(scores, ids, top_m)
        if prev_signal is None:
            prev_signal, prev_vols = np.zeros_like(signal), s.vols
        dates.append(s.date)
        gross.append(csm_return(signal, s.vols, s.next_returns, sigma_tgt))
        turns.append(turnover(signal, prev_signal, s.vols, prev_vols, sigma_tgt))
        ndcgs.append(average_ndcg_at_k(s.labels, scores, top_m))
        pos_rows.append(scaled_positions(signal, s.vols, sigma_tgt))
        prev_signal, prev_vols = signal, s.vols
    gross = np.array(gross)
    turns = np.array(turns)
    return BacktestSeries(
        dates=np.array(dates, dtype="datetime64[D]"),
        gross=gross,
        net=apply_costs(gross, turns, cost_bps),
        turnover=turns,
        positions=np.array(pos_rows),
        instrument_ids=list(ids),
        ndcg=np.array(ndcgs),
        cost_bps=cost_bps,
    )


def rescale_series(series: BacktestSeries, sigma_tgt: float = SIGMA_TARGET) -> BacktestSeries:
    """Rescale a whole backtest so the gross series realizes sigma_tgt.

    The factor from the gross series scales positions and turnover too,
    then costs are re-applied, keeping net = gross - rate * turnover.
    """
    scaled_gross, factor = rescale_to_target(series.gross, sigma_tgt)
    scaled_turnover = series.turnover * factor
    return BacktestSeries(
        dates=series.dates.copy(),
        gross=scaled_gross,
        net=apply_costs(scaled_gross, scaled_turnover, series.cost_bps),
        turnover=scaled_turnover,
        positions=series.positions * factor,
        instrument_ids=list(series.instrument_ids),
        ndcg=series.ndcg.copy(),
        cost_bps=series.cost_bps,
    )


def series_metrics(series: BacktestSeries, net: bool = True) -> MetricReport:
    returns = series.net if net else series.gross
    return compute_metrics(returns, ndcg_values=series.ndcg, turnover_values=series.turnover)
