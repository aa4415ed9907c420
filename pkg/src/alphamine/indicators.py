"""Classical technical indicators used as pre-training targets and as the
hand-crafted factor pool.

Every indicator is computed for the whole panel at once as an
(n_tickers, n_days) array, NaN where history is insufficient; the scalar and
cross-section accessors slice that array.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import _kernels
from .market_data import DataError, Panel, eligible_rows

NAMES = ("MA", "EMA", "MACD", "PVT", "TOP10", "DC", "BOLL")

# positional parameter names per indicator, in S-expression/config order
_PARAMS = {
    "MA": ("N",),
    "EMA": ("N",),
    "MACD": ("m", "n"),
    "PVT": (),
    "TOP10": (),
    "DC": ("n",),
    "BOLL": ("n",),
}
_DEFAULTS = {"MA": (5,), "EMA": (12,), "MACD": (12, 26), "DC": (5,), "BOLL": (20,)}

# Scale-free ratios are computed on raw prices; level indicators on the
# standardized panel the networks see. See ``indicator_values``.
RATIO_INDICATORS = frozenset({"TOP10", "DC", "BOLL"})


@dataclass(frozen=True)
class IndicatorSpec:
    name: str
    params: tuple[int, ...] = ()

    def __post_init__(self):
        if self.name not in NAMES:
            raise ValueError(f"unknown indicator {self.name!r}")
        params = tuple(int(p) for p in self.params) or _DEFAULTS.get(self.name, ())
        object.__setattr__(self, "params", params)
        if len(params) != len(_PARAMS[self.name]):
            raise ValueError(f"{self.name} takes {len(_PARAMS[self.name])} parameter(s)")
        if any(p < 1 for p in params):
            raise ValueError("indicator windows must be >= 1")
        if self.name == "MACD" and not params[0] < params[1]:
            raise ValueError("MACD requires m < n")

    @property
    def named_params(self):
        return MappingProxyType(dict(zip(_PARAMS[self.name], self.params)))

    @property
    def label(self) -> str:
        return f"{self.name}({','.join(map(str, self.params))})" if self.params else self.name

    @property
    def lookback(self) -> int:
        """Days of history (including the current day) the value depends on."""
        if self.name == "MA":
            return self.params[0]
        if self.name == "EMA":
            return self.params[0]
        if self.name == "MACD":
            return self.params[1]
        if self.name == "TOP10":
            return 10
        if self.name in ("DC", "BOLL"):
            return self.params[0]
        return 2  # PVT

    @classmethod
    def parse(cls, text: str) -> IndicatorSpec:
        m = re.fullmatch(r"\s*([A-Z0-9]+)\s*(?:\(([^)]*)\))?\s*", text)
        if not m:
            raise ValueError(f"cannot parse indicator {text!r}")
        args = tuple(int(a) for a in m.group(2).split(",")) if m.group(2) else ()
        return cls(m.group(1), args)


DEFAULT_CATALOG: tuple[IndicatorSpec, ...] = tuple(
    IndicatorSpec.parse(s)
    for s in ("MA(5)", "MA(20)", "EMA(12)", "EMA(26)", "MACD(12,26)", "PVT", "TOP10", "DC(5)", "DC(15)", "BOLL(20)")
)


def check_catalog(catalog) -> tuple[IndicatorSpec, ...]:
    catalog = tuple(catalog)
    if len(set(catalog)) != len(catalog):
        raise ValueError("catalog entries must be distinct")
    return catalog


def sma(x: np.ndarray, n: int) -> np.ndarray:
    """Simple moving average over the last n values (n terms)."""
    return _kernels.rolling_mean(x, n)


def ema(x: np.ndarray, n: int) -> np.ndarray:
    """EMA with alpha = 2/(N+1), recursion seeded at the first observation."""
    return _kernels.ema_rows(x, 2.0 / (n + 1.0))


def _mask_warmup(values: np.ndarray, panel: Panel, lookback: int) -> np.ndarray:
    out = values.copy()
    for i, (lo, hi) in enumerate(panel.spans):
        out[i, : min(lo + lookback - 1, out.shape[1])] = np.nan
        out[i, hi + 1 :] = np.nan
    return out


def indicator_panel(spec: IndicatorSpec, panel: Panel) -> np.ndarray:
    """Indicator values for every (ticker, day) of ``panel``."""
    d = panel.data
    close = d["close"]
    name, p = spec.name, spec.params
    if name == "MA":
        out = sma(close, p[0])
    elif name == "EMA":
        out = ema(close, p[0])
    elif name == "MACD":
        out = ema(close, p[0]) - ema(close, p[1])
    elif name == "PVT":
        out = np.full_like(close, np.nan)
        for i, (lo, hi) in enumerate(panel.spans):
            c = close[i, lo : hi + 1]
            v = d["volume"][i, lo : hi + 1]
            inc = np.zeros_like(c)
            with np.errstate(divide="ignore", invalid="ignore"):
                inc[1:] = v[1:] * (c[1:] - c[:-1]) / c[:-1]
            out[i, lo : hi + 1] = np.cumsum(inc)
    elif name == "TOP10":
        ma10 = sma(close, 10)
        out = np.full_like(close, np.nan)
        for t in range(close.shape[1]):
            col = ma10[:, t]
            ok = np.isfinite(col)
            if not ok.any():
                continue
            vals = np.sort(col[ok])[::-1]
            top = vals[: max(1, int(np.ceil(0.1 * vals.size)))].mean()
            out[ok, t] = col[ok] / top - 1.0 if top != 0 else 0.0
    elif name == "DC":
        adj = d["adj_close"]
        ratio = adj / close
        h = sma(d["high"] * ratio, p[0])
        lo_ = sma(d["low"] * ratio, p[0])
        out = adj / (0.5 * (h + lo_))
    elif name == "BOLL":
        mean = sma(close, p[0])
        sd = _kernels.rolling_std(close, p[0])
        out = (mean - sd) / close
    else:  # pragma: no cover
        raise ValueError(name)
    return _mask_warmup(out, panel, spec.lookback)


def indicator_values(spec: IndicatorSpec, standardized: Panel) -> np.ndarray:
    """Indicator values on the basis used for pre-training and factor pools.

    Ratio indicators (TOP10, DC, BOLL) are evaluated on raw prices, where they
    are scale-free and hover near a fixed level; the others on the
    standardized panel, where they are functions of the network's own inputs.
    """
    base = standardized.prices if spec.name in RATIO_INDICATORS else standardized
    return indicator_panel(spec, base)


def compute_indicator(spec: IndicatorSpec, panel: Panel, ticker: str, date) -> float:
    i, t = panel.ticker_index(ticker), panel.day_index(date)
    lo, hi = panel.spans[i]
    if t > hi or t - spec.lookback + 1 < lo:
        raise DataError(f"insufficient history for {spec.label} at {ticker} {panel.calendar[t]}")
    v = float(indicator_panel(spec, panel)[i, t])
    if not np.isfinite(v):
        raise DataError(f"{spec.label} undefined at {ticker} {panel.calendar[t]}")
    return v


def indicator_cross_section(
    spec: IndicatorSpec, panel: Panel, date, n: int = 30, a: int = 5, values: np.ndarray | None = None
) -> tuple[tuple[str, ...], np.ndarray]:
    """Indicator values over the tickers ``day_batch`` would include, same order."""
    t = panel.day_index(date)
    rows = eligible_rows(panel, t, n, a)
    vals = indicator_panel(spec, panel) if values is None else values
    col = vals[rows, t]
    ok = np.isfinite(col)
    return tuple(panel.tickers[i] for i in rows[ok]), col[ok]
