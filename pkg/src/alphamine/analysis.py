"""Evaluation metrics shared by every factor source: exact Spearman IC,
cross-entropy diversity distance, k-means and the diversity score."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._kernels import rank_rows

STD_EPS = 1e-8


class IcValue(NamedTuple):
    value: float
    degenerate: bool


def spearman_ic(x, y) -> IcValue:
    """Pearson correlation of average ranks; a constant side gives (0, True)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman_ic needs two equal-length vectors")
    if x.size < 2:
        raise ValueError("spearman_ic needs at least 2 points")
    r = rank_rows(np.stack([x, y]))
    return IcValue(*_pearson_rows(r[:1], r[1:])[0])


def _pearson_rows(a: np.ndarray, b: np.ndarray) -> list[tuple[float, bool]]:
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    sa = np.sqrt((da * da).mean(axis=1))
    sb = np.sqrt((db * db).mean(axis=1))
    out = []
    for i in range(a.shape[0]):
        if sa[i] < STD_EPS or sb[i] < STD_EPS:
            out.append((0.0, True))
        else:
            r = float((da[i] * db[i]).mean() / (sa[i] * sb[i]))
            out.append((min(1.0, max(-1.0, r)), False))
    return out


def daily_spearman(values: np.ndarray, returns: np.ndarray, days) -> list[IcValue | None]:
    """Spearman IC per day column, restricted to rows finite on both sides.

    ``values`` and ``returns`` are (n_tickers, n_days). Days with fewer than 2
    usable rows give None. Days where every row is usable are ranked in one
    batch.
    """
    days = list(days)
    if not days:
        return []
    V = np.asarray(values, dtype=np.float64)[:, days].T
    R = np.asarray(returns, dtype=np.float64)[:, days].T
    ok = np.isfinite(V) & np.isfinite(R)
    full = ok.all(axis=1)
    out: list[IcValue | None] = [None] * len(days)
    if full.any() and V.shape[1] >= 2:
        idx = np.flatnonzero(full)
        res = _pearson_rows(rank_rows(V[idx]), rank_rows(R[idx]))
        for j, r in zip(idx, res):
            out[j] = IcValue(*r)
    for j in np.flatnonzero(~full):
        if ok[j].sum() >= 2:
            out[j] = spearman_ic(V[j, ok[j]], R[j, ok[j]])
    return out


@dataclass(frozen=True)
class IcSummary:
    mean: float
    std: float
    days: int
    degenerate: int
    per_day: tuple[float, ...]


def summarize_ic(ics: list[IcValue | None]) -> IcSummary:
    good = [v.value for v in ics if v is not None and not v.degenerate]
    deg = sum(1 for v in ics if v is not None and v.degenerate)
    if not good:
        return IcSummary(0.0, 0.0, 0, deg, ())
    arr = np.array(good)
    return IcSummary(float(arr.mean()), float(arr.std()), len(good), deg, tuple(good))


# ---------------------------------------------------------------------------
# diversity
# ---------------------------------------------------------------------------


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def diversity_distance(f1, f2) -> float:
    """Cross-entropy sum softmax(f1) * log(1 / softmax(f2)) over the cross-section."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 1:
        raise ValueError("diversity_distance needs two equal-length vectors")
    if f1.size < 2:
        raise ValueError("diversity_distance needs at least 2 stocks")
    p = softmax(f1)
    z2 = f2 - f2.max()
    log_q = z2 - np.log(np.exp(z2).sum())
    return float(-(p * log_q).sum())


def cs_zscore(f: np.ndarray) -> np.ndarray:
    """Row-wise cross-sectional z-score; constant rows map to zeros."""
    f = np.asarray(f, dtype=np.float64)
    sd = f.std(axis=-1, keepdims=True)
    return np.where(sd > STD_EPS, (f - f.mean(axis=-1, keepdims=True)) / np.maximum(sd, STD_EPS), 0.0)


def distance_matrix(factors: np.ndarray, standardize: bool = True) -> np.ndarray:
    """F x F matrix of diversity_distance between factor rows (F x m)."""
    f = cs_zscore(factors) if standardize else np.asarray(factors, dtype=np.float64)
    z = f - f.max(axis=1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_q)
    return -(p @ log_q.T)


class KMeansResult(NamedTuple):
    assignments: np.ndarray
    centers: np.ndarray
    inertia_trace: tuple[float, ...]


def kmeans(points, k: int, seed=0, max_iters: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; empty clusters take the farthest point."""
    X = np.asarray(points, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        idx.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    centers = X[idx].copy()

    trace = []
    assign = np.full(n, -1)
    for _ in range(max_iters):
        dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        trace.append(float(dist[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = X[members].mean(axis=0)
            else:
                far = int(dist[np.arange(n), assign].argmax())
                centers[c] = X[far]
                assign[far] = c
    dist = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    trace.append(float(dist[np.arange(n), assign].sum()))
    return KMeansResult(assign, centers, tuple(trace))


def center_spread(centers: np.ndarray) -> float:
    k = centers.shape[0]
    if k < 2:
        return 0.0
    d = np.sqrt(((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    return float(d[np.triu_indices(k, 1)].mean())


@dataclass(frozen=True)
class DiversityReport:
    distances: np.ndarray
    assignments: np.ndarray
    centers: np.ndarray
    score: float
    k: int


def diversity_report(factors, k: int = 3, seed=0, restarts: int = 10) -> DiversityReport:
    """Cluster rows of the distance matrix and score the spread of the centers.

    ``factors`` is F x m for one day; each factor is z-scored across stocks
    before the softmax so dispersion differences between factors do not
    masquerade as diversity.
    """
    f = np.asarray(factors, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] < 2:
        raise ValueError("factor matrix must be F x m with m >= 2")
    if not np.all(np.isfinite(f)):
        raise ValueError("factor matrix must be finite")
    if f.shape[0] < k:
        raise ValueError(f"diversity needs at least k={k} factors, got {f.shape[0]}")
    D = distance_matrix(f)
    # best of several seedings so the score does not hinge on one local optimum
    runs = [kmeans(D, k, [seed, r] if np.isscalar(seed) else [*seed, r]) for r in range(restarts)]
    res = min(runs, key=lambda r: r.inertia_trace[-1])
    return DiversityReport(D, res.assignments, res.centers, center_spread(res.centers), k)


def diversity_score(factors, k: int = 3, seed=0, restarts: int = 10) -> float:
    return diversity_report(factors, k, seed, restarts).score


def diversity_over_days(pool_values: list[np.ndarray], days, k: int = 3, seed=0) -> list[float]:
    """Per-day diversity of a pool given as a list of (n_tickers, n_days) arrays."""
    stack = np.stack(pool_values)  # F x N x T
    out = []
    for t in days:
        col = stack[:, :, t]
        ok = np.isfinite(col).all(axis=0)
        if ok.sum() < 2:
            continue
        out.append(diversity_score(col[:, ok], k, seed))
    return out


def mds_2d(D: np.ndarray) -> np.ndarray:
    """Classical multidimensional scaling of a (symmetrized) distance matrix."""
    D = np.asarray(D, dtype=np.float64)
    S = 0.5 * (D + D.T)
    np.fill_diagonal(S, 0.0)
    n = S.shape[0]
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (S**2) @ J
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1][:2]
    coords = vecs[:, order] * np.sqrt(np.maximum(vals[order], 0.0))
    # fix the sign of each axis so layouts are reproducible
    for j in range(coords.shape[1]):
        if coords[np.argmax(np.abs(coords[:, j])), j] < 0:
            coords[:, j] = -coords[:, j]
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((n, 2 - coords.shape[1]))])
    return coords


# ---------------------------------------------------------------------------
# scheme comparison table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchemeRow:
    pool: str
    factors: int
    mean_ic: float
    ic_std: float
    diversity: float | None
    days: int


def scheme_report(
    pools: dict[str, list[np.ndarray]],
    returns: np.ndarray,
    days,
    k: int = 3,
    seed=0,
    with_diversity: bool = True,
) -> list[SchemeRow]:
    """One row per pool: mean test IC of its factors and mean daily diversity.

    Each pool is a list of factor value arrays shaped like ``returns``
    (n_tickers, n_days); ``days`` are the evaluation day indices.
    """
    days = list(days)
    if not days:
        raise ValueError("empty evaluation range")
    rows = []
    for name, pool in pools.items():
        if not pool:
            raise ValueError(f"pool {name!r} is empty")
        summaries = [summarize_ic(daily_spearman(v, returns, days)) for v in pool]
        ic_means = np.array([s.mean for s in summaries])
        div = None
        if with_diversity:
            per_day = diversity_over_days(pool, days, k, seed)
            div = float(np.mean(per_day)) if per_day else float("nan")
        rows.append(
            SchemeRow(
                name,
                len(pool),
                float(ic_means.mean()),
                float(ic_means.std()),
                div,
                max(s.days for s in summaries),
            )
        )
    return rows
