import numpy as np
import pytest

from alphamine.market_data import Bar, SynthConfig, generate_synthetic, panel_from_bars, split, standardize


@pytest.fixture(scope="session")
def planted():
    """Default desk panel (50 x 400, rho = 0.3, seed 0) with its split."""
    panel = generate_synthetic(SynthConfig())
    ranges = split(panel)
    return panel, standardize(panel, ranges[0]), ranges


@pytest.fixture(scope="session")
def noise():
    panel = generate_synthetic(SynthConfig(signal_strength=0.0))
    ranges = split(panel)
    return panel, standardize(panel, ranges[0]), ranges


def make_panel(closes, tickers=None, start="2021-01-04", volume=1000.0, spread=0.0):
    """Panel from a (N, T) close matrix; OHLC collapse to close unless spread > 0."""
    from alphamine.market_data import business_days

    closes = np.atleast_2d(np.asarray(closes, dtype=float))
    N, T = closes.shape
    tickers = tickers or [f"T{i:02d}" for i in range(N)]
    days = business_days(start, T)
    bars = []
    for i, tk in enumerate(tickers):
        for t, d in enumerate(days):
            c = float(closes[i, t])
            bars.append(Bar(d, tk, c, c * (1 + spread), c * (1 - spread), c, c, volume))
    return panel_from_bars(bars)


@pytest.fixture
def panel_factory():
    return make_panel
