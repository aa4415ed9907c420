"""Daily OHLCV panels: loading, validation, standardization, windows, splits,
and a synthetic generator with a planted reversal signal."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from datetime import date as _date
from datetime import timedelta
from pathlib import Path
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

SERIES = ("open", "high", "low", "close", "volume")
FIELDS = ("open", "high", "low", "close", "adj_close", "volume")
HEADER = ("date", "ticker") + FIELDS
STD_EPS = 1e-8


class DataError(ValueError):
    """Raised for malformed input data or impossible requests on a panel."""


class Bar(NamedTuple):
    date: str
    ticker: str
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float


def check_bar(bar: Bar) -> str | None:
    """Return a description of the first violated bar invariant, or None."""
    vals = (bar.open, bar.high, bar.low, bar.close, bar.adj_close, bar.volume)
    if not all(math.isfinite(v) for v in vals):
        return "non-finite value"
    if bar.low > bar.high:
        return "low > high"
    if not bar.low <= bar.open <= bar.high:
        return "open outside [low, high]"
    if not bar.low <= bar.close <= bar.high:
        return "close outside [low, high]"
    if bar.volume < 0:
        return "negative volume"
    if bar.adj_close <= 0 or bar.close <= 0:
        return "non-positive price"
    return None


@dataclass(frozen=True, eq=False)
class Panel:
    """Aligned daily bars, one row per ticker and one column per calendar day.

    ``data[f]`` has shape (n_tickers, n_days) and holds NaN outside a ticker's
    contiguous trading span ``spans[i] = (first, last)`` (inclusive indices).
    A standardized panel keeps a reference to the raw panel it came from in
    ``raw`` so forward returns are always measured on real prices.
    """

    calendar: tuple[str, ...]
    tickers: tuple[str, ...]
    data: dict[str, np.ndarray]
    spans: tuple[tuple[int, int], ...]
    raw: Panel | None = field(default=None, repr=False)

    def __post_init__(self):
        for arr in self.data.values():
            arr.setflags(write=False)

    @property
    def n_days(self) -> int:
        return len(self.calendar)

    @property
    def n_tickers(self) -> int:
        return len(self.tickers)

    @property
    def prices(self) -> Panel:
        return self.raw if self.raw is not None else self

    def day_index(self, date: str | int) -> int:
        if isinstance(date, (int, np.integer)):
            if not 0 <= date < self.n_days:
                raise DataError(f"day index {date} outside calendar")
            return int(date)
        try:
            return self._index[date]
        except KeyError:
            raise DataError(f"date {date} not in calendar") from None

    @property
    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx_cache")
        if idx is None:
            idx = {d: i for i, d in enumerate(self.calendar)}
            object.__setattr__(self, "_idx_cache", idx)
        return idx

    def ticker_index(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise DataError(f"unknown ticker {ticker}") from None

    def bar(self, ticker: str, date: str | int) -> Bar:
        i, t = self.ticker_index(ticker), self.day_index(date)
        lo, hi = self.spans[i]
        if not lo <= t <= hi:
            raise DataError(f"no bar for {ticker} on {self.calendar[t]}")
        return Bar(self.calendar[t], ticker, *(float(self.data[f][i, t]) for f in FIELDS))

    def n_bars(self) -> int:
        return sum(hi - lo + 1 for lo, hi in self.spans)

    def stack(self, series=SERIES) -> np.ndarray:
        """Series stacked as (n_tickers, len(series), n_days)."""
        return np.stack([self.data[s] for s in series], axis=1)


@dataclass(frozen=True)
class SplitSpec:
    train_days: int = 250
    val_days: int = 30
    test_days: int = 90

    def __post_init__(self):
        if min(self.train_days, self.val_days, self.test_days) < 1:
            raise DataError("split counts must be >= 1")


@dataclass(frozen=True)
class DayBatch:
    date: str
    day: int
    tickers: tuple[str, ...]
    rows: np.ndarray  # panel row index of each ticker
    inputs: np.ndarray  # (m, 5, n)
    forward_returns: np.ndarray  # (m,)

    @property
    def m(self) -> int:
        return len(self.tickers)

    def flat_inputs(self) -> np.ndarray:
        """Inputs as (m, 5*n): series-major, then time (oldest first)."""
        return self.inputs.reshape(self.m, -1)


def _build_panel(records: dict[tuple[str, str], Bar], raw=None) -> Panel:
    calendar = tuple(sorted({d for _, d in records}))
    tickers = tuple(sorted({t for t, _ in records}))
    col = {d: j for j, d in enumerate(calendar)}
    row = {t: i for i, t in enumerate(tickers)}
    data = {f: np.full((len(tickers), len(calendar)), np.nan) for f in FIELDS}
    for (t, d), bar in records.items():
        i, j = row[t], col[d]
        for f in FIELDS:
            data[f][i, j] = getattr(bar, f)
    spans = []
    keep = []
    for i, t in enumerate(tickers):
        present = np.flatnonzero(np.isfinite(data["close"][i]))
        lo, hi = int(present[0]), int(present[-1])
        if present.size != hi - lo + 1:
            log.warning("dropping ticker %s: gaps inside its trading span", t)
            continue
        keep.append(i)
        spans.append((lo, hi))
    if not keep:
        raise DataError("no contiguous tickers")
    data = {f: np.ascontiguousarray(a[keep]) for f, a in data.items()}
    return Panel(calendar, tuple(tickers[i] for i in keep), data, tuple(spans), raw)


def panel_from_bars(bars) -> Panel:
    """Validate bars and assemble a Panel (duplicates and bad bars raise)."""
    records: dict[tuple[str, str], Bar] = {}
    for n, bar in enumerate(bars, start=1):
        problem = check_bar(bar)
        if problem:
            raise DataError(f"bar {n} ({bar.ticker} {bar.date}): {problem}")
        key = (bar.ticker, bar.date)
        if key in records:
            raise DataError(f"bar {n}: duplicate ({bar.ticker}, {bar.date})")
        records[key] = bar
    if not records:
        raise DataError("no rows")
    return _build_panel(records)


def load_panel(path) -> Panel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    records: dict[tuple[str, str], Bar] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("no rows")
        if tuple(h.strip() for h in header) != HEADER:
            raise DataError(f"bad header, expected {','.join(HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(HEADER):
                raise DataError(f"row {lineno}: expected {len(HEADER)} fields, got {len(rec)}")
            try:
                _date.fromisoformat(rec[0])
                bar = Bar(rec[0], rec[1], *(float(x) for x in rec[2:]))
            except ValueError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
            problem = check_bar(bar)
            if problem:
                raise DataError(f"row {lineno}: {problem}")
            key = (bar.ticker, bar.date)
            if key in records:
                raise DataError(f"row {lineno}: duplicate ({bar.ticker}, {bar.date})")
            records[key] = bar
    if not records:
        raise DataError("no rows")
    return _build_panel(records)


def write_panel(panel: Panel, path) -> None:
    """Write a raw panel as CSV; floats use repr so reloading is lossless."""
    panel = panel.prices
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t, day in enumerate(panel.calendar):
            for i, tk in enumerate(panel.tickers):
                lo, hi = panel.spans[i]
                if lo <= t <= hi:
                    w.writerow([day, tk] + [repr(float(panel.data[f][i, t])) for f in FIELDS])


def forward_return(panel: Panel, ticker: str, t: int | str, a: int = 5) -> float:
    p = panel.prices
    i, t = p.ticker_index(ticker), p.day_index(t)
    lo, hi = p.spans[i]
    if t < lo or t + a > hi:
        raise DataError("insufficient future data")
    adj = p.data["adj_close"][i]
    return float(adj[t + a] / adj[t] - 1.0)


def forward_returns(panel: Panel, a: int = 5) -> np.ndarray:
    """All a-day forward returns as (n_tickers, n_days); NaN where undefined."""
    if a < 1:
        raise DataError("holding period must be >= 1 day")
    adj = panel.prices.data["adj_close"]
    out = np.full_like(adj, np.nan)
    if a < adj.shape[1]:
        out[:, :-a] = adj[:, a:] / adj[:, :-a] - 1.0
    return out


def standardize(panel: Panel, train_range: range) -> Panel:
    """Per-ticker z-score of every series, using train-range statistics only."""
    if len(train_range) == 0:
        raise DataError("empty train range")
    base = panel.prices
    sl = slice(train_range.start, train_range.stop)
    data = {}
    for f in FIELDS:
        x = panel.data[f]
        seg = x[:, sl]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mu = np.nanmean(seg, axis=1, keepdims=True)
            sd = np.nanstd(seg, axis=1, keepdims=True)
        data[f] = (x - mu) / np.maximum(sd, STD_EPS)
    return Panel(panel.calendar, panel.tickers, data, panel.spans, raw=base)


def split(panel: Panel, spec: SplitSpec = SplitSpec()) -> tuple[range, range, range]:
    need = spec.train_days + spec.val_days + spec.test_days
    if need > panel.n_days:
        raise DataError(f"calendar too short: {panel.n_days} days < {need}")
    a = spec.train_days
    b = a + spec.val_days
    return range(0, a), range(a, b), range(b, b + spec.test_days)


def eligible_rows(panel: Panel, t: int, n: int, a: int, limit: int | None = None) -> np.ndarray:
    """Rows with n days of history ending at t and a days of future after t.

    ``limit`` caps the last calendar index whose price may be read, which is
    how training code keeps returns from leaking past its own range.
    """
    last = t + a
    if limit is not None and last > limit:
        return np.empty(0, dtype=int)
    return np.array(
        [i for i, (lo, hi) in enumerate(panel.spans) if lo <= t - n + 1 and last <= hi], dtype=int
    )


def range_days(panel: Panel, rng: range, n: int, a: int, contain_future: bool = True) -> list[int]:
    """Days in ``rng`` usable as batch dates.

    With ``contain_future`` the a-day forward return must also fall inside
    ``rng``; the test range is evaluated with it off.
    """
    limit = rng.stop - 1 if contain_future else None
    return [t for t in rng if t - n + 1 >= 0 and eligible_rows(panel, t, n, a, limit).size >= 2]


def day_batch(panel: Panel, date, n: int = 30, a: int = 5, limit: int | None = None) -> DayBatch:
    t = panel.day_index(date)
    rows = eligible_rows(panel, t, n, a, limit)
    if t - n + 1 < 0 or rows.size < 2:
        raise DataError(f"degenerate cross-section on {panel.calendar[t]}")
    stacked = panel.stack()
    inputs = np.ascontiguousarray(stacked[rows, :, t - n + 1 : t + 1])
    adj = panel.prices.data["adj_close"]
    fwd = adj[rows, t + a] / adj[rows, t] - 1.0
    if not (np.isfinite(inputs).all() and np.isfinite(fwd).all()):
        raise DataError(f"non-finite window on {panel.calendar[t]}")
    return DayBatch(panel.calendar[t], t, tuple(panel.tickers[i] for i in rows), rows, inputs, fwd)


def window_tensor(panel: Panel, n: int) -> np.ndarray:
    """Every trailing window as (n_tickers, n_days, 5*n), NaN-padded at the start.

    Row (i, t) equals ``day_batch(...).flat_inputs()`` for ticker i at day t.
    """
    stacked = panel.stack()  # (N, 5, T)
    N, S, T = stacked.shape
    out = np.full((N, T, S * n), np.nan)
    if T >= n:
        win = np.lib.stride_tricks.sliding_window_view(stacked, n, axis=2)  # (N, 5, T-n+1, n)
        out[:, n - 1 :, :] = win.transpose(0, 2, 1, 3).reshape(N, T - n + 1, S * n)
    return out


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    tickers: int = 50
    days: int = 400
    signal_strength: float = 0.3
    seed: int = 0
    daily_vol: float = 0.02
    start: str = "2020-01-01"

    def validate(self):
        if self.tickers < 20:
            raise DataError("synthetic panel needs >= 20 tickers")
        if self.days < 320:
            raise DataError("synthetic panel needs >= 320 days")
        if not 0.0 <= self.signal_strength < 1.0:
            raise DataError("signal_strength must lie in [0, 1)")
        if self.daily_vol <= 0:
            raise DataError("daily_vol must be positive")


def business_days(start: str, count: int) -> list[str]:
    d = _date.fromisoformat(start)
    out = []
    while len(out) < count:
        if d.weekday() < 5:
            out.append(d.isoformat())
        d += timedelta(days=1)
    return out


def _cs_zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > STD_EPS else np.zeros_like(x)


def generate_synthetic(cfg: SynthConfig = SynthConfig()) -> Panel:
    """Geometric random walk whose returns load on a cross-sectional reversal signal.

    The signal on day t is the negated, cross-sectionally z-scored trailing
    5-day log return (``planted_signal``). Each daily log return is
    ``vol * (beta * z_{t-1} + sqrt(1 - beta^2) * eps)`` with
    ``beta = rho * sqrt(5) / 3``: summed over a 5-day holding window the
    overlapping signals add up to a correlation of about ``rho`` with z_t.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    N, T = cfg.tickers, cfg.days
    beta = cfg.signal_strength * math.sqrt(5.0) / 3.0
    resid = math.sqrt(1.0 - beta * beta)
    vol = cfg.daily_vol

    log_close = np.empty((N, T))
    log_close[:, 0] = np.log(rng.uniform(10.0, 100.0, N))
    eps = rng.standard_normal((N, T))
    for t in range(1, T):
        if t > 5:
            z = _cs_zscore(-(log_close[:, t - 1] - log_close[:, t - 6]))
        else:
            z = np.zeros(N)
        log_close[:, t] = log_close[:, t - 1] + vol * (beta * z + resid * eps[:, t])

    close = np.exp(log_close)
    gap = vol * 0.3 * rng.standard_normal((N, T))
    open_ = np.empty_like(close)
    open_[:, 0] = close[:, 0] * np.exp(gap[:, 0])
    open_[:, 1:] = close[:, :-1] * np.exp(gap[:, 1:])
    top = np.maximum(open_, close)
    bottom = np.minimum(open_, close)
    high = top * np.exp(np.abs(rng.standard_normal((N, T))) * vol * 0.5)
    low = bottom * np.exp(-np.abs(rng.standard_normal((N, T))) * vol * 0.5)
    base_vol = rng.uniform(2e5, 5e6, (N, 1))
    ret = np.zeros_like(close)
    ret[:, 1:] = np.abs(np.diff(log_close, axis=1))
    volume = np.round(base_vol * np.exp(0.3 * rng.standard_normal((N, T)) + 10.0 * ret))

    data = {
        "open": open_,
        "high": high,
        "low": low,
        "close": close,
        "adj_close": close.copy(),
        "volume": volume,
    }
    tickers = tuple(f"S{i:03d}" for i in range(N))
    return Panel(tuple(business_days(cfg.start, T)), tickers, data, tuple((0, T - 1) for _ in range(N)))


def planted_signal(panel: Panel) -> np.ndarray:
    """The reversal signal the generator loads on, as (n_tickers, n_days).

    Unstandardized across the cross-section: ranks (and hence IC) are what
    matter. NaN for the first 5 days of each ticker.
    """
    adj = panel.prices.data["adj_close"]
    out = np.full_like(adj, np.nan)
    out[:, 5:] = -(np.log(adj[:, 5:]) - np.log(adj[:, :-5]))
    return out


def truncate(panel: Panel, stop: int) -> Panel:
    """The panel restricted to its first ``stop`` calendar days.

    Tickers whose span starts at or after ``stop`` are dropped. A standardized
    panel keeps its statistics and truncates its raw panel alongside.
    """
    if not 1 <= stop <= panel.n_days:
        raise DataError(f"cannot truncate {panel.n_days} days to {stop}")
    keep = [i for i, (lo, _) in enumerate(panel.spans) if lo < stop]
    if not keep:
        raise DataError("no tickers trade before the cut")
    data = {f: np.ascontiguousarray(a[keep, :stop]) for f, a in panel.data.items()}
    spans = tuple((panel.spans[i][0], min(panel.spans[i][1], stop - 1)) for i in keep)
    raw = truncate(panel.raw, stop) if panel.raw is not None else None
    return Panel(panel.calendar[:stop], tuple(panel.tickers[i] for i in keep), data, spans, raw)
