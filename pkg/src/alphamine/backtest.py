"""Multi-factor long portfolio backtest.

Pipeline: label the extreme forward-return movers of each training day,
fit a small gradient-boosted classifier on the factor pool, then on every
rebalance day of the test range hold the top-scored stocks equal-weighted
against an equal-weight universe hedge.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .market_data import DataError, Panel, forward_returns

log = logging.getLogger(__name__)

TRADING_DAYS = 252
LABEL_FRACTION = 0.3
MIN_STOCKS = 10


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSet:
    days: np.ndarray  # calendar index per row
    rows: np.ndarray  # panel ticker row per row
    features: np.ndarray  # (n, F)
    labels: np.ndarray  # (n,) of 0/1

    def __len__(self) -> int:
        return self.labels.shape[0]


def pool_features(pool: Sequence[np.ndarray], t: int, rows: np.ndarray) -> np.ndarray:
    """Per-day rank-normalized features (rank / m), shape (len(rows), F)."""
    if len(pool) == 0:
        return np.empty((rows.size, 0))
    vals = np.stack([np.asarray(f)[rows, t] for f in pool])
    return (_kernels.rank_rows(vals) / rows.size).T


def _usable_rows(panel: Panel, pool: Sequence[np.ndarray], t: int, a: int, limit: int | None) -> np.ndarray:
    if limit is not None and t + a > limit:
        return np.empty(0, dtype=int)
    rows = np.array([i for i, (lo, hi) in enumerate(panel.spans) if lo <= t and t + a <= hi], dtype=int)
    for f in pool:
        if rows.size == 0:
            break
        rows = rows[np.isfinite(np.asarray(f)[rows, t])]
    return rows


def label_day(returns: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions labeled 1 and 0 for one day's forward returns.

    Sorting is by return descending, then by position, so ties fall to the
    earlier ticker.
    """
    m = returns.size
    k = int(math.floor(LABEL_FRACTION * m + 1e-9))
    order = np.lexsort((np.arange(m), -returns))
    return order[:k], order[m - k :]


def build_labels(
    panel: Panel,
    day_range: range,
    factors: Sequence[np.ndarray],
    a: int = 5,
    contain_future: bool = True,
) -> LabeledSet:
    """Top 30% by forward return labeled 1, bottom 30% labeled 0, rest dropped."""
    ret = forward_returns(panel.prices, a)
    limit = day_range.stop - 1 if contain_future else None
    days, rows, feats, labels = [], [], [], []
    skipped = []
    for t in day_range:
        r = _usable_rows(panel, factors, t, a, limit)
        if limit is not None and t + a > limit:
            continue
        if r.size < MIN_STOCKS:
            skipped.append(panel.calendar[t])
            continue
        pos, neg = label_day(ret[r, t])
        x = pool_features(factors, t, r)
        pick = np.concatenate([pos, neg])
        days.append(np.full(pick.size, t))
        rows.append(r[pick])
        feats.append(x[pick])
        labels.append(np.concatenate([np.ones(pos.size), np.zeros(neg.size)]))
    if skipped:
        log.warning("skipped %d day(s) with fewer than %d usable stocks (first %s)", len(skipped), MIN_STOCKS, skipped[0])
    if not days:
        return LabeledSet(np.empty(0, int), np.empty(0, int), np.empty((0, len(factors))), np.empty(0))
    return LabeledSet(np.concatenate(days), np.concatenate(rows), np.vstack(feats), np.concatenate(labels))


# ---------------------------------------------------------------------------
# gradient-boosted trees, logistic loss
# ---------------------------------------------------------------------------


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add(self) -> int:
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.value, 0.0)):
            lst.append(v)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        node = np.zeros(X.shape[0], dtype=int)
        active = np.ones(X.shape[0], dtype=bool)
        feat = np.array(self.feature)
        thr = np.array(self.threshold)
        left = np.array(self.left)
        right = np.array(self.right)
        val = np.array(self.value)
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            leaf = feat[nd] < 0
            out[idx[leaf]] = val[nd[leaf]]
            active[idx[leaf]] = False
            go = idx[~leaf]
            nd = nd[~leaf]
            x = X[go, feat[nd]]
            node[go] = np.where(x <= thr[nd], left[nd], right[nd])
        return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(y: np.ndarray, z: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


@dataclass
class Scorer:
    base: float
    trees: list[Tree]
    learning_rate: float
    importances: np.ndarray
    loss_trace: list[float]

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        z = np.full(X.shape[0], self.base)
        for tr in self.trees:
            z += self.learning_rate * tr.predict(X)
        return z

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.margin(X))

    __call__ = predict_proba


def _grow(X, g, h, idx, depth, max_depth, lam, mcw, tree: Tree, gains: np.ndarray) -> int:
    node = tree._add()
    G, H = g[idx].sum(), h[idx].sum()
    tree.value[node] = -G / (H + lam)
    if depth >= max_depth or idx.size < 2:
        return node
    best = (0.0, -1, -1, None)
    for f in range(X.shape[1]):
        xs_all = X[idx, f]
        order = np.argsort(xs_all, kind="stable")
        xs = xs_all[order]
        gain, i = _kernels.split_scan(xs, g[idx][order], h[idx][order], lam, mcw)
        if i >= 0 and gain > best[0] + 1e-12:
            best = (gain, f, i, (xs, order))
    gain, f, i, extra = best
    if f < 0:
        return node
    xs, order = extra
    tree.feature[node] = f
    tree.threshold[node] = 0.5 * (xs[i] + xs[i + 1])
    gains[f] += gain
    li, ri = idx[order[: i + 1]], idx[order[i + 1 :]]
    tree.left[node] = _grow(X, g, h, li, depth + 1, max_depth, lam, mcw, tree, gains)
    tree.right[node] = _grow(X, g, h, ri, depth + 1, max_depth, lam, mcw, tree, gains)
    return node


def train_classifier(
    train: LabeledSet,
    rounds: int = 100,
    depth: int = 3,
    learning_rate: float = 0.1,
    reg_lambda: float = 1.0,
    min_child_weight: float = 1e-3,
) -> Scorer:
    """Newton-boosted regression trees on the logistic loss (exact greedy splits)."""
    X = np.asarray(train.features, dtype=np.float64)
    y = np.asarray(train.labels, dtype=np.float64)
    if y.size == 0 or np.all(y == y[0]):
        raise ValueError("training set needs both classes")
    if not 1 <= depth <= 3:
        raise ValueError("depth must lie in [1, 3]")
    p0 = float(y.mean())
    base = math.log(p0 / (1.0 - p0))
    z = np.full(y.size, base)
    gains = np.zeros(X.shape[1])
    trees = []
    trace = [logistic_loss(y, z)]
    all_idx = np.arange(y.size)
    for _ in range(rounds):
        p = _sigmoid(z)
        g = p - y
        h = p * (1.0 - p)
        tree = Tree()
        _grow(X, g, h, all_idx, 0, depth, reg_lambda, min_child_weight, tree, gains)
        trees.append(tree)
        z = z + learning_rate * tree.predict(X)
        trace.append(logistic_loss(y, z))
    total = gains.sum()
    imp = gains / total if total > 0 else np.full(X.shape[1], 1.0 / max(X.shape[1], 1))
    return Scorer(base, trees, learning_rate, imp, trace)


def select_features(
    pk_pool: Sequence[np.ndarray],
    new_pool: Sequence[np.ndarray],
    train: LabeledSet,
    keep: int = 50,
    **boost,
) -> tuple[list[np.ndarray], list[int]]:
    """Keep the ``keep`` most important features of the union pk + new.

    ``train`` must be labeled on the union in that order. Returns the kept
    factor arrays and their union indices, most important first.
    """
    union = list(pk_pool) + list(new_pool)
    if train.features.shape[1] != len(union):
        raise ValueError("labeled set does not match the union of pools")
    if len(union) <= keep:
        if len(union) < keep:
            log.warning("union has %d features, fewer than keep=%d; keeping all", len(union), keep)
    scorer = train_classifier(train, **boost)
    order = np.lexsort((np.arange(len(union)), -scorer.importances))
    chosen = [int(i) for i in order[: min(keep, len(union))]]
    return [union[i] for i in chosen], chosen


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyConfig:
    holding: int = 5
    long_fraction: float = 0.1
    commission: float = 0.005  # per round trip; half charged on each side

    def __post_init__(self):
        if not 0.0 < self.long_fraction <= 1.0:
            raise ValueError("long_fraction must lie in (0, 1]")
        if self.commission < 0:
            raise ValueError("commission must be >= 0")
        if self.holding < 1:
            raise ValueError("holding must be >= 1")


@dataclass(frozen=True)
class EquityCurve:
    dates: tuple[str, ...]
    strategy: np.ndarray
    hedge: np.ndarray
    excess: np.ndarray
    rebalances: tuple[str, ...] = ()


@dataclass(frozen=True)
class PerfReport:
    annual_return: float
    sharpe: float
    max_drawdown: float


def _weights(n_tickers: int, held: np.ndarray) -> np.ndarray:
    w = np.zeros(n_tickers)
    w[held] = 1.0 / held.size
    return w


def _run(adj: np.ndarray, picks: list[tuple[int, np.ndarray]], a: int, commission: float) -> np.ndarray:
    """Daily NAV of an equal-weight buy-and-hold per period.

    Commission for a period (trades at its start, plus the final exit) is
    charged additively on that period's return, so a flat round trip costs
    exactly the round-trip rate.
    """
    side = 0.5 * commission
    nav = [1.0]
    prev = np.zeros(adj.shape[0])
    for k, (t, held) in enumerate(picks):
        w = _weights(adj.shape[0], held)
        bought = float(np.maximum(w - prev, 0.0).sum())
        sold = float(np.maximum(prev - w, 0.0).sum())
        rel = adj[held, t : t + a + 1] / adj[held, t : t + 1]
        growth = rel.mean(axis=0)
        cost = side * (bought + sold)
        last = k == len(picks) - 1
        start = nav[-1]
        for j in range(1, a + 1):
            c = cost + (side if last and j == a else 0.0)
            nav.append(start * (growth[j] + (0.0 - c)))
        drift = w[held] * rel[:, -1]
        prev = np.zeros_like(w)
        prev[held] = drift / drift.sum()
    return np.array(nav)


def rebalance_days(panel: Panel, day_range: range, a: int) -> list[int]:
    last = panel.n_days - 1
    return [t for t in range(day_range.start, day_range.stop, a) if t + a <= last]


def simulate_scores(panel: Panel, day_range: range, scores: np.ndarray, cfg: StrategyConfig = StrategyConfig()) -> EquityCurve:
    """Backtest from a precomputed (n_tickers, n_days) score array."""
    a = cfg.holding
    adj = panel.prices.data["adj_close"]
    strat, hedge = [], []
    for t in rebalance_days(panel, day_range, a):
        universe = _usable_rows(panel, (), t, a, None)
        scored = universe[np.isfinite(scores[universe, t])]
        if scored.size == 0:
            continue
        n_long = max(1, int(math.floor(cfg.long_fraction * scored.size + 0.5)))
        order = np.lexsort((scored, -scores[scored, t]))
        strat.append((t, np.sort(scored[order[:n_long]])))
        hedge.append((t, universe))
    if not strat:
        raise DataError("no eligible rebalance days")
    # consecutive periods only: the curve stops at the first gap
    chain = [strat[0]]
    for p in strat[1:]:
        if p[0] != chain[-1][0] + a:
            break
        chain.append(p)
    hedge = hedge[: len(chain)]
    s_nav = _run(adj, chain, a, cfg.commission)
    h_nav = _run(adj, hedge, a, 0.0)
    t0 = chain[0][0]
    dates = panel.calendar[t0 : t0 + a * len(chain) + 1]
    return EquityCurve(tuple(dates), s_nav, h_nav, s_nav / h_nav, tuple(panel.calendar[t] for t, _ in chain))


def pool_scores(panel: Panel, days: Sequence[int], scorer: Callable[[np.ndarray], np.ndarray], pool: Sequence[np.ndarray], a: int = 5) -> np.ndarray:
    """Scorer output for every usable stock on ``days``; NaN elsewhere."""
    out = np.full((panel.n_tickers, panel.n_days), np.nan)
    for t in days:
        rows = _usable_rows(panel, pool, t, a, None)
        if rows.size:
            out[rows, t] = scorer(pool_features(pool, t, rows))
    return out


def simulate(
    panel: Panel,
    day_range: range,
    scorer: Callable[[np.ndarray], np.ndarray],
    pool: Sequence[np.ndarray],
    cfg: StrategyConfig = StrategyConfig(),
) -> EquityCurve:
    """Score the pool each rebalance day, long the top fraction, hold ``a`` days."""
    days = rebalance_days(panel, day_range, cfg.holding)
    return simulate_scores(panel, day_range, pool_scores(panel, days, scorer, pool, cfg.holding), cfg)


def max_drawdown(nav: np.ndarray) -> float:
    nav = np.asarray(nav, dtype=np.float64)
    peak = np.maximum.accumulate(nav)
    return float(np.max(1.0 - nav / peak))


def performance(curve: EquityCurve | np.ndarray) -> PerfReport:
    """Annualized excess return, Sharpe (zero risk-free) and max drawdown."""
    nav = np.asarray(curve.excess if isinstance(curve, EquityCurve) else curve, dtype=np.float64)
    if nav.size < 2:
        raise ValueError("curve needs at least 2 points")
    r = nav[1:] / nav[:-1] - 1.0
    annual = float(nav[-1] / nav[0]) ** (TRADING_DAYS / r.size) - 1.0
    sd = float(r.std())
    sharpe = float(r.mean() / sd * math.sqrt(TRADING_DAYS)) if sd > 1e-12 else 0.0
    return PerfReport(annual, sharpe, max_drawdown(nav))
