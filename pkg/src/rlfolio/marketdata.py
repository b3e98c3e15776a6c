"""OHLCV loading, technical-indicator features, and train/test windowing.

Asset features are a fixed nine-channel indicator set; market features are
five aggregate channels (plus an optional extra channel such as a synthetic
regime flag). Standardization is z-score per channel, pooled across assets
and training timesteps only, so test windows never leak statistics.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rlfolio.errors import (
    DuplicateRowError,
    EmptyUniverseError,
    ParseError,
    WindowError,
)

OHLCV_HEADER = ["date", "symbol", "open", "high", "low", "close", "volume"]

ASSET_CHANNELS = [
    "logret_1",
    "logret_5",
    "logret_20",
    "macd_line",
    "macd_hist",
    "kdj_k",
    "kdj_d",
    "rsi_14",
    "vol_20",
]

MARKET_CHANNELS = ["index_ret", "ma5_ratio", "ma20_ratio", "xsec_std", "adv_frac"]

# indicators are unreliable before this many bars; never emitted as states
WARMUP = 40


@dataclass
class PriceTable:
    """Aligned per-asset OHLCV history; the raw market truth."""

    symbols: list[str]
    dates: list[str]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        n, t = len(self.symbols), len(self.dates)
        for name in ("open", "high", "low", "close", "volume"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if arr.shape != (n, t):
                raise ValueError(f"{name} shape {arr.shape} != ({n}, {t})")
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise ValueError("dates must be strictly increasing")
        for name in ("open", "high", "low", "close"):
            if not np.all(getattr(self, name) > 0):
                raise ValueError(f"{name} contains non-positive prices")
        if not np.all(self.volume >= 0):
            raise ValueError("volume contains negative values")
        if not all(np.all(np.isfinite(getattr(self, f))) for f in ("open", "high", "low", "close", "volume")):
            raise ValueError("price table contains non-finite cells")

    @property
    def n_assets(self) -> int:
        return len(self.symbols)

    @property
    def n_periods(self) -> int:
        return len(self.dates)

    def simple_returns(self) -> np.ndarray:
        """Per-period simple returns, shape (N, T-1); column t is period t -> t+1."""
        return self.close[:, 1:] / self.close[:, :-1] - 1.0

    def date_index(self, date: str) -> int:
        return self.dates.index(date)


@dataclass
class SplitSpec:
    """Timestamp boundaries of the train/test ranges (inclusive)."""

    train_start: str
    train_end: str
    test_start: str
    test_end: str

    def __post_init__(self):
        for name in ("train_start", "train_end", "test_start", "test_end"):
            dt.date.fromisoformat(getattr(self, name))
        if not (self.train_start <= self.train_end < self.test_start <= self.test_end):
            raise ValueError("split ranges must be non-empty and train_end < test_start")

    def resolve(self, dates: list[str]) -> tuple[int, int, int, int]:
        """Index bounds (train_lo, train_hi, test_lo, test_hi), inclusive."""
        arr = np.asarray(dates)
        train = np.nonzero((arr >= self.train_start) & (arr <= self.train_end))[0]
        test = np.nonzero((arr >= self.test_start) & (arr <= self.test_end))[0]
        if len(train) == 0:
            raise WindowError("no dates fall inside the training range")
        if len(test) == 0:
            raise WindowError("no dates fall inside the test range")
        return int(train[0]), int(train[-1]), int(test[0]), int(test[-1])


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------


def load_ohlcv(path, min_coverage: float = 1.0) -> PriceTable:
    """Load the long-form OHLCV CSV, dropping symbols with incomplete coverage.

    Keeps symbols present on at least ``min_coverage`` of all dates, then
    restricts the date axis to dates where every surviving symbol has a row,
    so the table has no missing cells.
    """
    rows: dict[tuple[str, str], tuple[float, ...]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyUniverseError(f"{path}: empty file") from None
        if [h.strip() for h in header] != OHLCV_HEADER:
            raise ParseError(1, f"expected header {','.join(OHLCV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 7:
                raise ParseError(line_no, f"expected 7 fields, got {len(row)}")
            date, symbol = row[0].strip(), row[1].strip()
            try:
                dt.date.fromisoformat(date)
            except ValueError:
                raise ParseError(line_no, f"bad date {date!r}") from None
            try:
                vals = tuple(float(x) for x in row[2:7])
            except ValueError:
                raise ParseError(line_no, "non-numeric price/volume field") from None
            if not all(np.isfinite(vals)):
                raise ParseError(line_no, "non-finite price/volume field")
            if any(v <= 0 for v in vals[:4]):
                raise ParseError(line_no, "prices must be > 0")
            if vals[4] < 0:
                raise ParseError(line_no, "volume must be >= 0")
            key = (date, symbol)
            if key in rows:
                raise DuplicateRowError(f"duplicate (date, symbol) = {key} at line {line_no}")
            rows[key] = vals

    if not rows:
        raise EmptyUniverseError(f"{path}: no data rows")

    all_dates = sorted({d for d, _ in rows})
    all_symbols = sorted({s for _, s in rows})
    coverage = {
        s: sum(1 for d in all_dates if (d, s) in rows) / len(all_dates) for s in all_symbols
    }
    symbols = [s for s in all_symbols if coverage[s] >= min_coverage]
    if not symbols:
        raise EmptyUniverseError(f"{path}: no symbol meets coverage {min_coverage}")
    dates = [d for d in all_dates if all((d, s) in rows for s in symbols)]
    if not dates:
        raise EmptyUniverseError(f"{path}: surviving symbols share no common dates")

    shape = (len(symbols), len(dates))
    mats = [np.empty(shape) for _ in range(5)]
    for i, s in enumerate(symbols):
        for j, d in enumerate(dates):
            vals = rows[(d, s)]
            for m, v in zip(mats, vals):
                m[i, j] = v
    return PriceTable(symbols, dates, *mats)


def write_ohlcv_csv(table: PriceTable, path) -> None:
    """Canonical long-form CSV, dates outer, symbols inner, both sorted."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(OHLCV_HEADER)
        for j, d in enumerate(table.dates):
            for i, s in enumerate(table.symbols):
                w.writerow(
                    [
                        d,
                        s,
                        repr(float(table.open[i, j])),
                        repr(float(table.high[i, j])),
                        repr(float(table.low[i, j])),
                        repr(float(table.close[i, j])),
                        repr(float(table.volume[i, j])),
                    ]
                )


# ---------------------------------------------------------------------------
# indicators
# ---------------------------------------------------------------------------


def _ema(x: np.ndarray, n: int) -> np.ndarray:
    """Exponential moving average along the last axis, seeded with x[..., 0]."""
    alpha = 2.0 / (n + 1.0)
    out = np.empty_like(x)
    out[..., 0] = x[..., 0]
    for t in range(1, x.shape[-1]):
        out[..., t] = alpha * x[..., t] + (1.0 - alpha) * out[..., t - 1]
    return out


def _rolling_extreme(x: np.ndarray, n: int, fn) -> np.ndarray:
    """Trailing-window min/max along the last axis, truncated at the start."""
    out = np.empty_like(x)
    for t in range(x.shape[-1]):
        lo = max(0, t - n + 1)
        out[..., t] = fn(x[..., lo : t + 1], axis=-1)
    return out


def asset_indicator_panel(prices: PriceTable) -> np.ndarray:
    """Raw (unstandardized) indicator channels, shape (N, F, T_total).

    Channels follow ASSET_CHANNELS. Values in the leading region where an
    indicator is undefined are neutral fills (0 for returns/vol, 50 for
    oscillators); those bars sit inside the warm-up and are never emitted.
    """
    c = prices.close
    N, T = c.shape
    panel = np.zeros((N, len(ASSET_CHANNELS), T))
    logc = np.log(c)

    for ch, k in ((0, 1), (1, 5), (2, 20)):
        if T > k:
            panel[:, ch, k:] = logc[:, k:] - logc[:, :-k]

    ema12 = _ema(c, 12)
    ema26 = _ema(c, 26)
    line = ema12 - ema26
    signal = _ema(line, 9)
    panel[:, 3, :] = line
    panel[:, 4, :] = line - signal

    ll = _rolling_extreme(prices.low, 9, np.min)
    hh = _rolling_extreme(prices.high, 9, np.max)
    span = hh - ll
    rsv = np.where(span > 0, 100.0 * (c - ll) / np.where(span > 0, span, 1.0), 50.0)
    k_line = np.empty_like(c)
    d_line = np.empty_like(c)
    k_prev = np.full(N, 50.0)
    d_prev = np.full(N, 50.0)
    for t in range(T):
        k_prev = (2.0 * k_prev + rsv[:, t]) / 3.0
        d_prev = (2.0 * d_prev + k_prev) / 3.0
        k_line[:, t] = k_prev
        d_line[:, t] = d_prev
    panel[:, 5, :] = k_line
    panel[:, 6, :] = d_line

    period = 14
    rsi = np.full((N, T), 50.0)
    if T > period:
        delta = np.diff(c, axis=1)
        gain = np.maximum(delta, 0.0)
        loss = np.maximum(-delta, 0.0)
        avg_g = gain[:, :period].mean(axis=1)
        avg_l = loss[:, :period].mean(axis=1)

        def _rsi_of(g, l):
            with np.errstate(divide="ignore", invalid="ignore"):
                rs = np.where(l > 0, g / np.where(l > 0, l, 1.0), np.inf)
            val = np.where(np.isinf(rs), 100.0, 100.0 - 100.0 / (1.0 + rs))
            return np.where((g == 0) & (l == 0), 50.0, val)

        rsi[:, period] = _rsi_of(avg_g, avg_l)
        for t in range(period + 1, T):
            avg_g = (avg_g * (period - 1) + gain[:, t - 1]) / period
            avg_l = (avg_l * (period - 1) + loss[:, t - 1]) / period
            rsi[:, t] = _rsi_of(avg_g, avg_l)
    panel[:, 7, :] = rsi

    win = 20
    if T > win:
        r1 = np.zeros((N, T))
        r1[:, 1:] = np.diff(logc, axis=1)
        sq = r1**2
        csum = np.concatenate([np.zeros((N, 1)), np.cumsum(r1, axis=1)], axis=1)
        csq = np.concatenate([np.zeros((N, 1)), np.cumsum(sq, axis=1)], axis=1)
        for t in range(win, T):
            m = (csum[:, t + 1] - csum[:, t + 1 - win]) / win
            v = (csq[:, t + 1] - csq[:, t + 1 - win]) / win - m**2
            panel[:, 8, t] = np.sqrt(np.maximum(v, 0.0))
    return panel


def market_indicator_panel(prices: PriceTable, extra: np.ndarray | None = None) -> np.ndarray:
    """Market-level channels, shape (F_m, T_total); see MARKET_CHANNELS.

    ``extra`` (length T_total), when given, is appended unchanged as one more
    channel (used for the synthetic regime flag).
    """
    c = prices.close
    N, T = c.shape
    ret = np.zeros((N, T))
    ret[:, 1:] = c[:, 1:] / c[:, :-1] - 1.0

    idx_ret = ret.mean(axis=0)
    level = np.cumprod(1.0 + idx_ret)
    ma5 = np.array([level[max(0, t - 4) : t + 1].mean() for t in range(T)])
    ma20 = np.array([level[max(0, t - 19) : t + 1].mean() for t in range(T)])
    xsec = ret.std(axis=0)
    adv = (ret > 0).mean(axis=0)
    adv[0] = 0.0

    chans = [idx_ret, level / ma5 - 1.0, level / ma20 - 1.0, xsec, adv]
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float64)
        if extra.shape != (T,):
            raise ValueError(f"extra market channel shape {extra.shape} != ({T},)")
        chans.append(extra)
    return np.stack(chans, axis=0)


# ---------------------------------------------------------------------------
# standardized feature set
# ---------------------------------------------------------------------------


@dataclass
class FeatureWindow:
    """One state's feature slice: assets (N,F,T), market (F_m,T)."""

    x_s: np.ndarray
    x_m: np.ndarray
    t_index: int

    @property
    def dims(self) -> tuple[int, int, int, int]:
        n, f, t = self.x_s.shape
        return n, f, self.x_m.shape[0], t


@dataclass
class FeatureSet:
    """Standardized feature panels plus windowing over a PriceTable."""

    prices: PriceTable
    lookback: int
    x_s_panel: np.ndarray  # (N, F, T_total), standardized
    x_m_panel: np.ndarray  # (F_m, T_total), standardized (extra channel raw)
    train_lo: int
    train_hi: int
    test_lo: int
    test_hi: int
    asset_stats: tuple[np.ndarray, np.ndarray]
    market_stats: tuple[np.ndarray, np.ndarray]
    warmup: int = WARMUP
    first_valid: int = field(init=False)

    def __post_init__(self):
        self.first_valid = self.warmup + self.lookback - 1
        if not np.all(np.isfinite(self.x_s_panel)) or not np.all(np.isfinite(self.x_m_panel)):
            raise ValueError("standardized features contain non-finite values")

    @property
    def n_assets(self) -> int:
        return self.x_s_panel.shape[0]

    @property
    def n_channels(self) -> int:
        return self.x_s_panel.shape[1]

    @property
    def n_market_channels(self) -> int:
        return self.x_m_panel.shape[0]

    def window(self, t: int) -> FeatureWindow:
        """Features spanning the ``lookback`` steps ending at timestep t."""
        if t < self.first_valid or t >= self.prices.n_periods:
            raise WindowError(
                f"timestep {t} outside valid range [{self.first_valid}, {self.prices.n_periods - 1}]"
            )
        lo = t - self.lookback + 1
        return FeatureWindow(
            x_s=self.x_s_panel[:, :, lo : t + 1].copy(),
            x_m=self.x_m_panel[:, lo : t + 1].copy(),
            t_index=t,
        )

    def train_steps(self) -> tuple[int, int]:
        """Valid decision timesteps inside the training range (inclusive)."""
        return max(self.first_valid, self.train_lo), self.train_hi

    def test_steps(self) -> tuple[int, int]:
        return max(self.first_valid, self.test_lo), self.test_hi


def _standardize(panel: np.ndarray, t_lo: int, t_hi: int, skip: set[int] = frozenset()):
    """Z-score per channel with stats pooled over the [t_lo, t_hi] slice.

    panel is (..., C, T); stats pool every leading axis. Channels in ``skip``
    pass through raw. Std floor 1e-8 guards constant channels.
    """
    C = panel.shape[-2]
    mean = np.zeros(C)
    std = np.ones(C)
    out = panel.copy()
    for ch in range(C):
        if ch in skip:
            continue
        sl = panel[..., ch, t_lo : t_hi + 1]
        mean[ch] = sl.mean()
        std[ch] = max(sl.std(), 1e-8)
        out[..., ch, :] = (panel[..., ch, :] - mean[ch]) / std[ch]
    return out, (mean, std)


def build_features(
    prices: PriceTable,
    lookback: int,
    split: SplitSpec,
    extra_market: np.ndarray | None = None,
    warmup: int = WARMUP,
) -> FeatureSet:
    """Compute and standardize both feature panels for a split.

    Standardization statistics come from the training slice only (from the
    end of warm-up through train_end); the extra market channel, when
    present, is passed through raw so discrete flags stay interpretable.
    """
    train_lo, train_hi, test_lo, test_hi = split.resolve(prices.dates)
    if prices.n_periods < warmup + lookback + 1:
        raise WindowError(
            f"need at least {warmup + lookback + 1} periods, have {prices.n_periods}"
        )
    if train_hi < warmup + lookback - 1:
        raise WindowError("training range ends inside the warm-up region")

    raw_s = asset_indicator_panel(prices)
    raw_m = market_indicator_panel(prices, extra=extra_market)
    stats_lo = warmup
    x_s, s_stats = _standardize(raw_s, stats_lo, train_hi)
    skip = {raw_m.shape[0] - 1} if extra_market is not None else set()
    x_m, m_stats = _standardize(raw_m, stats_lo, train_hi, skip=skip)
    return FeatureSet(
        prices=prices,
        lookback=lookback,
        x_s_panel=x_s,
        x_m_panel=x_m,
        train_lo=train_lo,
        train_hi=train_hi,
        test_lo=test_lo,
        test_hi=test_hi,
        asset_stats=s_stats,
        market_stats=m_stats,
        warmup=warmup,
    )


def compute_asset_features(prices: PriceTable, lookback: int, split: SplitSpec) -> list[np.ndarray]:
    """Standardized (N,F,T) asset tensors for every valid timestep."""
    fs = build_features(prices, lookback, split)
    lo, hi = fs.first_valid, prices.n_periods - 1
    return [fs.window(t).x_s for t in range(lo, hi + 1)]


def compute_market_features(prices: PriceTable, extra: np.ndarray | None = None) -> np.ndarray:
    """Raw market-feature series (F_m, T_total); standardization happens in build_features."""
    return market_indicator_panel(prices, extra=extra)
