"""Synthetic market generator for pipeline and end-to-end tests.

Weekly returns follow a persistent AR(1), so next week's cross-section
is a noisy linear function of the one-week momentum feature and a
ranker has real signal to find. Daily closes are piecewise constant
within ISO weeks, which makes the weekly downsampler recover the
planted series exactly (the Friday close is the last close before a
Sunday anchor, and staleness never exceeds the limit).
"""

import csv
import datetime as dt
import os

import numpy as np

WEEKS_PER_YEAR = 52.0


def weekly_ar1_returns(
    rng: np.random.Generator,
    n_weeks: int,
    sigmas_annual: np.ndarray,
    persistence: float,
) -> np.ndarray:
    """Stationary AR(1) per symbol: r[t+1] = b r[t] + e, sd held at the
    symbol's weekly vol."""
    sigmas_annual = np.asarray(sigmas_annual, dtype=np.float64)
    weekly = sigmas_annual / np.sqrt(WEEKS_PER_YEAR)
    shock = weekly * np.sqrt(1.0 - persistence**2)
    out = np.empty((n_weeks, weekly.size))
    out[0] = rng.normal(scale=weekly)
    for t in range(1, n_weeks):
        out[t] = persistence * out[t - 1] + rng.normal(scale=shock)
    return out


def week_anchors(start_sunday: str, n_weeks: int) -> np.ndarray:
    start = np.datetime64(start_sunday, "D")
    if (start.astype(dt.date)).isoweekday() != 7:
        raise ValueError(f"{start_sunday} is not a Sunday")
    return start + 7 * np.arange(n_weeks)


def write_prices_csv(path, symbols, anchors, weekly_returns, base=100.0) -> None:
    """One constant close per symbol per ISO week, quoted Mon..Fri."""
    levels = base * np.cumprod(1.0 + weekly_returns, axis=0)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "symbol", "close"])
        for t, anchor in enumerate(anchors):
            monday = anchor - 6
            for d in range(5):  # ISO weekdays 1..5
                day = monday + d
                for j, sym in enumerate(symbols):
                    writer.writerow([str(day), sym, repr(float(levels[t, j]))])


def write_vix_csv(path, anchors, spike_weeks=(), base=20.0, spike_level=40.0) -> None:
    """Flat volatility index with square spikes on chosen week indices."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "close"])
        spikes = set(spike_weeks)
        for t, anchor in enumerate(anchors):
            monday = anchor - 6
            value = spike_level if t in spikes else base
            for d in range(5):
                writer.writerow([str(monday + d), repr(float(value))])


def make_market(
    directory,
    n_weeks: int,
    seed: int,
    n_target: int = 8,
    n_source: int = 10,
    persistence: float = 0.35,
    start_sunday: str = "2016-01-10",
    spike_weeks=(),
):
    """Write target, source, and VIX CSVs; returns their paths.

    Target and source universes are disjoint but share the AR(1)
    dynamics, so a source ranker's knowledge transfers.
    """
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    anchors = week_anchors(start_sunday, n_weeks)
    target_sigmas = 0.4 + 0.4 * rng.random(n_target)   # crypto-like vols
    source_sigmas = 0.05 + 0.1 * rng.random(n_source)  # FX-like vols
    target_returns = weekly_ar1_returns(rng, n_weeks, target_sigmas, persistence)
    source_returns = weekly_ar1_returns(rng, n_weeks, source_sigmas, persistence)
    paths = {
        "target": os.path.join(directory, "target_prices.csv"),
        "source": os.path.join(directory, "source_prices.csv"),
        "vix": os.path.join(directory, "vix.csv"),
    }
    write_prices_csv(paths["target"], [f"C{i}" for i in range(n_target)], anchors, target_returns)
    write_prices_csv(paths["source"], [f"F{i}" for i in range(n_source)], anchors, source_returns)
    write_vix_csv(paths["vix"], anchors, spike_weeks=spike_weeks)
    return paths


def shuffle_labels_csv(samples_csv, seed: int) -> None:
    """Corrupt a prepared samples file by permuting the quintile labels
    within every week; everything else is untouched."""
    with open(samples_csv, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    bin_col = header.index("bin")
    week_col = header.index("week_end")
    rng = np.random.default_rng(seed)
    by_week: dict[str, list[int]] = {}
    for i, row in enumerate(rows):
        by_week.setdefault(row[week_col], []).append(i)
    for week in sorted(by_week):
        idx = by_week[week]
        bins = [rows[i][bin_col] for i in idx]
        order = rng.permutation(len(idx))
        for slot, i in enumerate(idx):
            rows[i][bin_col] = bins[order[slot]]
    with open(samples_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
