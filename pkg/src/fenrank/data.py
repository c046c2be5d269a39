"""Data pipeline: daily closes to weekly ranking samples.

Stages: parse daily close prices, downsample to one observation per ISO
week, compute weekly simple returns, estimate ex-ante volatility with an
exponentially weighted std (span parameterisation), winsorise returns
with causal EWM mean/std bands (halflife parameterisation), build
multi-horizon momentum features, and attach next-week quintile labels.

Two different EWM decay conventions are deliberately in play:
span s    -> lambda = 1 - 2/(s+1)   (volatility estimator)
halflife h -> lambda = 2^(-1/h)      (winsorisation bands)

Everything is causal: statistics at week t use data up to and including
t, labels at week t use only week t+1 returns.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .ranking import assign_quintiles

WEEKS_PER_YEAR = 52
VOL_SPAN_WEEKS = 26
VOL_FLOOR_ANNUAL = 0.005
WINSOR_HALFLIFE_WEEKS = 26
WINSOR_N_SIGMA = 3.0
REGIME_SMA_DAYS = 60
REGIME_THRESHOLD = 1.05
SOURCE_HORIZONS = (1, 2, 3, 4)
TARGET_HORIZONS = (1, 2, 3)
DEFAULT_ANCHOR_WEEKDAY = 7  # ISO weekday: 7 = Sunday, the last day of the ISO week
MAX_STALE_TRADING_DAYS = 5

RISK_OFF = "risk_off"
NORMAL = "normal"


class DataError(ValueError):
    """Raised for malformed input files or unusable panels."""


# ---------------------------------------------------------------------------
# containers


@dataclass
class PricePanel:
    dates: np.ndarray          # datetime64[D], strictly ascending
    symbols: list[str]
    closes: np.ndarray         # len(dates) x len(symbols), NaN where missing


@dataclass
class WeeklyClosePanel:
    week_ends: np.ndarray      # datetime64[D] anchor dates
    symbols: list[str]
    closes: np.ndarray         # no missing values


@dataclass
class WeeklyReturnPanel:
    week_ends: np.ndarray      # datetime64[D]; row t is the return over the week ending here
    symbols: list[str]
    returns: np.ndarray
    vol_estimates: np.ndarray  # annualized ex-ante vol, NaN during warm-up


@dataclass
class RegimeLabels:
    week_ends: np.ndarray
    states: np.ndarray         # "normal" | "risk_off" per week

    def state_of(self, week_end) -> str | None:
        idx = np.flatnonzero(self.week_ends == np.datetime64(week_end, "D"))
        return str(self.states[idx[0]]) if idx.size else None


@dataclass
class RankingSample:
    """One rebalance date: the cross-section a model scores in one shot."""

    date: np.datetime64
    instrument_ids: list[str]
    features: np.ndarray        # n x k
    labels: np.ndarray          # n ints in 0..4, from next-week raw returns
    vols: np.ndarray            # n annualized ex-ante vols at the rebalance date
    next_returns: np.ndarray    # n raw simple returns over the following week
    next_norm_returns: np.ndarray  # next_returns / weekly vol (regression target)
    feature_names: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.instrument_ids)


@dataclass
class Dataset:
    samples: list[RankingSample]
    feature_names: list[str]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.samples[idx], self.feature_names)
        return self.samples[idx]

    @property
    def dates(self) -> np.ndarray:
        return np.array([s.date for s in self.samples], dtype="datetime64[D]")

    def between(self, start=None, end=None) -> "Dataset":
        """Samples with start <= date < end (either bound optional)."""
        picked = []
        for s in self.samples:
            if start is not None and s.date < np.datetime64(start, "D"):
                continue
            if end is not None and s.date >= np.datetime64(end, "D"):
                continue
            picked.append(s)
        return Dataset(picked, self.feature_names)


# ---------------------------------------------------------------------------
# parsing


def _parse_date(token: str, line_no: int) -> dt.date:
    try:
        return dt.date.fromisoformat(token)
    except ValueError:
        raise DataError(f"line {line_no}: bad date {token!r}, expected ISO-8601") from None


def _parse_float(token: str, line_no: int, what: str) -> float:
    try:
        return float(token)
    except ValueError:
        raise DataError(f"line {line_no}: bad {what} {token!r}") from None


def load_prices(path, universe: list[str] | None = None) -> PricePanel:
    """Parse a `date,symbol,close` CSV into a daily panel.

    When ``universe`` is given, its order fixes the column order and any
    other symbol is an error; otherwise the universe is every symbol
    seen, sorted. Duplicate (date, symbol) rows and malformed rows are
    rejected with their line number.
    """
    rows: dict[tuple[dt.date, str], float] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["date", "symbol", "close"]:
            raise DataError(f"{path}: expected header 'date,symbol,close', got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise DataError(f"line {line_no}: expected 3 fields, got {len(row)}")
            date = _parse_date(row[0].strip(), line_no)
            symbol = row[1].strip()
            if not symbol:
                raise DataError(f"line {line_no}: empty symbol")
            if universe is not None and symbol not in universe:
                raise DataError(f"line {line_no}: unknown symbol {symbol!r}")
            close = _parse_float(row[2].strip(), line_no, "close")
            key = (date, symbol)
            if key in rows:
                raise DataError(f"line {line_no}: duplicate row for {symbol} on {date}")
            rows[key] = close
    if not rows:
        raise DataError(f"{path}: no rows")
    symbols = list(universe) if universe is not None else sorted({s for _, s in rows})
    dates = sorted({d for d, _ in rows})
    closes = np.full((len(dates), len(symbols)), np.nan)
    date_idx = {d: i for i, d in enumerate(dates)}
    sym_idx = {s: j for j, s in enumerate(symbols)}
    for (d, s), c in rows.items():
        closes[date_idx[d], sym_idx[s]] = c
    return PricePanel(np.array(dates, dtype="datetime64[D]"), symbols, closes)


def load_index_series(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a `date,close` CSV (e.g. a volatility index) into aligned
    date and value arrays sorted by date."""
    rows: dict[dt.date, float] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["date", "close"]:
            raise DataError(f"{path}: expected header 'date,close', got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataError(f"line {line_no}: expected 2 fields, got {len(row)}")
            date = _parse_date(row[0].strip(), line_no)
            if date in rows:
                raise DataError(f"line {line_no}: duplicate row for {date}")
            rows[date] = _parse_float(row[1].strip(), line_no, "close")
    if not rows:
        raise DataError(f"{path}: no rows")
    dates = sorted(rows)
    values = np.array([rows[d] for d in dates])
    return np.array(dates, dtype="datetime64[D]"), values


# ---------------------------------------------------------------------------
# weekly downsampling


def _iso_anchor(date: dt.date, anchor_weekday: int) -> dt.date:
    """The configured weekday of the ISO week containing ``date``."""
    iso = date.isocalendar()
    return dt.date.fromisocalendar(iso[0], iso[1], anchor_weekday)


def to_weekly(
    panel: PricePanel,
    anchor_weekday: int = DEFAULT_ANCHOR_WEEKDAY,
    max_stale_days: int = MAX_STALE_TRADING_DAYS,
) -> WeeklyClosePanel:
    """Downsample to the last close at or before each week's anchor day.

    One anchor per ISO week present in the data. A symbol's weekly close
    may be forward-filled across at most ``max_stale_days`` trading days
    (counted on the panel's own calendar); a week where any symbol is
    staler than that, or has no close at all, is dropped for all symbols.
    """
    if not 1 <= anchor_weekday <= 7:
        raise DataError(f"anchor weekday must be an ISO weekday 1..7, got {anchor_weekday}")
    py_dates = panel.dates.astype(object)
    anchors = sorted({_iso_anchor(d, anchor_weekday) for d in py_dates})
    valid = ~np.isnan(panel.closes)
    week_ends, weekly_rows = [], []
    for anchor in anchors:
        anchor64 = np.datetime64(anchor, "D")
        idx_anchor = int(np.searchsorted(panel.dates, anchor64, side="right")) - 1
        if idx_anchor < 0:
            continue
        row = np.empty(len(panel.symbols))
        ok = True
        for j in range(len(panel.symbols)):
            col_valid = np.flatnonzero(valid[: idx_anchor + 1, j])
            if col_valid.size == 0 or idx_anchor - col_valid[-1] > max_stale_days:
                ok = False
                break
            row[j] = panel.closes[col_valid[-1], j]
        if ok:
            week_ends.append(anchor64)
            weekly_rows.append(row)
    if len(week_ends) < 2:
        raise DataError("panel must span at least two complete weeks")
    return WeeklyClosePanel(np.array(week_ends, dtype="datetime64[D]"), list(panel.symbols), np.array(weekly_rows))


def weekly_returns(weekly: WeeklyClosePanel) -> tuple[np.ndarray, np.ndarray]:
    """Simple returns p_t / p_{t-1} - 1 and their week-end dates."""
    closes = weekly.closes
    if closes.shape[0] < 2:
        raise DataError("need at least two weekly closes to form returns")
    if (closes <= 0).any():
        bad = np.argwhere(closes <= 0)[0]
        raise DataError(
            f"nonpositive close for {weekly.symbols[bad[1]]} at {weekly.week_ends[bad[0]]}"
        )
    return closes[1:] / closes[:-1] - 1.0, weekly.week_ends[1:]


# ---------------------------------------------------------------------------
# rolling statistics


def ewm_volatility(
    returns: np.ndarray,
    span_weeks: int = VOL_SPAN_WEEKS,
    floor: float = VOL_FLOOR_ANNUAL,
) -> np.ndarray:
    """Annualized exponentially weighted std of weekly returns.

    Span parameterisation (decay 1 - 2/(span+1)), unbiased weighted
    variance, annualized by sqrt(52) and floored. Row t uses returns up
    to and including t, so it is ex-ante for the week t -> t+1. The first
    row is NaN (a single observation has no dispersion).
    """
    frame = pd.DataFrame(np.atleast_2d(returns.T).T)
    std = frame.ewm(span=span_weeks, adjust=True, min_periods=2).std().to_numpy()
    annual = std * np.sqrt(WEEKS_PER_YEAR)
    out = np.where(np.isnan(annual), np.nan, np.maximum(annual, floor))
    return out.reshape(np.asarray(returns).shape)


def winsorise(
    returns: np.ndarray,
    halflife_weeks: int = WINSOR_HALFLIFE_WEEKS,
    n_sigma: float = WINSOR_N_SIGMA,
) -> np.ndarray:
    """Clamp each point to its causal EWM mean +- n_sigma EWM std band.

    Halflife parameterisation (decay 2^(-1/halflife)). The statistics at
    t include the point being clamped; points whose std is still
    undefined (the first observation) pass through unchanged.
    """
    arr = np.asarray(returns, dtype=np.float64)
    frame = pd.DataFrame(np.atleast_2d(arr.T).T)
    ewm = frame.ewm(halflife=halflife_weeks, adjust=True, min_periods=1)
    mean = ewm.mean().to_numpy()
    std = frame.ewm(halflife=halflife_weeks, adjust=True, min_periods=2).std().to_numpy()
    lower = np.where(np.isnan(std), -np.inf, mean - n_sigma * std)
    upper = np.where(np.isnan(std), np.inf, mean + n_sigma * std)
    return np.clip(arr, lower.reshape(arr.shape), upper.reshape(arr.shape))


def build_weekly_panel(weekly: WeeklyClosePanel) -> WeeklyReturnPanel:
    returns, week_ends = weekly_returns(weekly)
    return WeeklyReturnPanel(
        week_ends=week_ends,
        symbols=list(weekly.symbols),
        returns=returns,
        vol_estimates=ewm_volatility(returns),
    )


# ---------------------------------------------------------------------------
# features, labels, datasets


def feature_columns(horizons) -> list[str]:
    return [f"raw_{h}" for h in horizons] + [f"norm_{h}" for h in horizons]


def build_features(returns: np.ndarray, vols_annual: np.ndarray, horizons) -> np.ndarray:
    """Multi-horizon momentum features from winsorised weekly returns.

    For each horizon tau: the compounded return over the trailing tau
    weeks (inclusive), and the same normalized by weekly vol * sqrt(tau).
    Output is weeks x symbols x 2*len(horizons); rows without enough
    history or without a vol estimate are NaN.
    """
    horizons = list(horizons)
    if not horizons or min(horizons) < 1:
        raise DataError(f"horizons must be positive week counts, got {horizons}")
    n_weeks, n_sym = returns.shape
    growth = 1.0 + returns
    weekly_vol = vols_annual / np.sqrt(WEEKS_PER_YEAR)
    out = np.full((n_weeks, n_sym, 2 * len(horizons)), np.nan)
    for col, tau in enumerate(horizons):
        for t in range(tau - 1, n_weeks):
            raw = growth[t - tau + 1 : t + 1].prod(axis=0) - 1.0
            out[t, :, col] = raw
            out[t, :, len(horizons) + col] = raw / (weekly_vol[t] * np.sqrt(tau))
    return out


def build_dataset(panel: WeeklyReturnPanel, horizons) -> Dataset:
    """Assemble per-week ranking samples with next-week quintile labels.

    Winsorisation applies to the returns that enter the features only;
    volatility estimates, labels and realized next-week returns all use
    raw returns. Weeks lacking full feature history, a vol estimate, or
    a following week are excluded.
    """
    horizons = list(horizons)
    wins = winsorise(panel.returns)
    feats = build_features(wins, panel.vol_estimates, horizons)
    names = feature_columns(horizons)
    ids = list(panel.symbols)
    samples = []
    for t in range(max(horizons) - 1, panel.returns.shape[0] - 1):
        if np.isnan(feats[t]).any() or np.isnan(panel.vol_estimates[t]).any():
            continue
        next_ret = panel.returns[t + 1]
        weekly_vol = panel.vol_estimates[t] / np.sqrt(WEEKS_PER_YEAR)
        samples.append(
            RankingSample(
                date=panel.week_ends[t],
                instrument_ids=ids,
                features=feats[t].copy(),
                labels=assign_quintiles(next_ret, ids),
                vols=panel.vol_estimates[t].copy(),
                next_returns=next_ret.copy(),
                next_norm_returns=next_ret / weekly_vol,
                feature_names=names,
            )
        )
    return Dataset(samples, names)


def dataset_from_prices(
    panel: PricePanel,
    horizons,
    anchor_weekday: int = DEFAULT_ANCHOR_WEEKDAY,
) -> Dataset:
    """Full pipeline: daily prices to weekly ranking samples."""
    return build_dataset(build_weekly_panel(to_weekly(panel, anchor_weekday)), horizons)


# ---------------------------------------------------------------------------
# regime labels


def label_regimes(
    dates: np.ndarray,
    values: np.ndarray,
    window_days: int = REGIME_SMA_DAYS,
    threshold: float = REGIME_THRESHOLD,
    anchor_weekday: int = DEFAULT_ANCHOR_WEEKDAY,
) -> RegimeLabels:
    """Label each ISO week risk-off when any contained day's index level
    is at least ``threshold`` times its trailing simple moving average.

    The moving average spans ``window_days`` observations including the
    current day; weeks containing any day without a full window are left
    unlabeled and excluded.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < window_days:
        raise DataError(f"need at least {window_days} daily observations, got {values.size}")
    sma = pd.Series(values).rolling(window_days, min_periods=window_days).mean().to_numpy()
    flagged = values >= threshold * sma  # NaN compares False
    defined = ~np.isnan(sma)
    py_dates = dates.astype(object)
    weeks: dict[dt.date, list[int]] = {}
    for i, d in enumerate(py_dates):
        weeks.setdefault(_iso_anchor(d, anchor_weekday), []).append(i)
    week_ends, states = [], []
    for anchor in sorted(weeks):
        idx = weeks[anchor]
        if not all(defined[i] for i in idx):
            continue
        week_ends.append(np.datetime64(anchor, "D"))
        states.append(RISK_OFF if any(flagged[i] for i in idx) else NORMAL)
    return RegimeLabels(np.array(week_ends, dtype="datetime64[D]"), np.array(states))


# ---------------------------------------------------------------------------
# dataset serialization


def save_samples_csv(dataset: Dataset, path) -> None:
    """One row per (week, symbol). Floats use repr, which round-trips
    float64 exactly through text."""
    header = ["week_end", "symbol", *dataset.feature_names,
              "bin", "vol_ann", "next_return", "next_norm_return"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in dataset.samples:
            for i, sym in enumerate(s.instrument_ids):
                writer.writerow([
                    str(s.date), sym,
                    *[repr(float(v)) for v in s.features[i]],
                    int(s.labels[i]),
                    repr(float(s.vols[i])),
                    repr(float(s.next_returns[i])),
                    repr(float(s.next_norm_returns[i])),
                ])


def load_samples_csv(path) -> Dataset:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 7 or header[:2] != ["week_end", "symbol"]:
            raise DataError(f"{path}: not a ranking-sample file")
        names = header[2:-4]
        if header[-4:] != ["bin", "vol_ann", "next_return", "next_norm_return"]:
            raise DataError(f"{path}: unexpected trailing columns {header[-4:]}")
        by_week: dict[str, list[list[str]]] = {}
        order: list[str] = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
            if row[0] not in by_week:
                order.append(row[0])
                by_week[row[0]] = []
            by_week[row[0]].append(row)
    samples = []
    k = len(names)
    for week in order:
        rows = by_week[week]
        samples.append(
            RankingSample(
                date=np.datetime64(week, "D"),
                instrument_ids=[r[1] for r in rows],
                features=np.array([[float(v) for v in r[2 : 2 + k]] for r in rows]),
                labels=np.array([int(r[-4]) for r in rows]),
                vols=np.array([float(r[-3]) for r in rows]),
                next_returns=np.array([float(r[-2]) for r in rows]),
                next_norm_returns=np.array([float(r[-1]) for r in rows]),
                feature_names=list(names),
            )
        )
    return Dataset(samples, list(names))
