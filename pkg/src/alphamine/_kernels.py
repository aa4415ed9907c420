"""Hot numeric loops, each with a numba and a pure-numpy implementation.

The public names (``rank_rows``, ``rolling_mean`` ...) point at the numba
versions unless numba is missing or ``ALPHAMINE_NO_JIT`` is set to a truthy
value before import. Both variants stay importable under their suffixed names
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_JIT = HAVE_NUMBA and os.environ.get("ALPHAMINE_NO_JIT", "").lower() not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# average ranks (ties share the mean of their positions), ranks start at 1
# ---------------------------------------------------------------------------


def rank_rows_numpy(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    for r in range(a.shape[0]):
        row = a[r]
        order = np.argsort(row, kind="mergesort")
        sorted_vals = row[order]
        # start index of each run of equal values
        starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
        ends = np.r_[starts[1:], row.size]
        avg = (starts + ends - 1) / 2.0 + 1.0
        ranks_sorted = np.repeat(avg, ends - starts)
        out[r, order] = ranks_sorted
    return out


def _rank_rows_loop(a):
    n_rows, n_cols = a.shape
    out = np.empty((n_rows, n_cols))
    for r in range(n_rows):
        row = a[r]
        order = np.argsort(row, kind="mergesort")
        i = 0
        while i < n_cols:
            j = i
            while j + 1 < n_cols and row[order[j + 1]] == row[order[i]]:
                j += 1
            avg = 0.5 * (i + j) + 1.0
            for t in range(i, j + 1):
                out[r, order[t]] = avg
            i = j + 1
    return out


# ---------------------------------------------------------------------------
# trailing-window mean / population std along the last axis; the first k-1
# columns (and anything touching a NaN) come out NaN
# ---------------------------------------------------------------------------


def rolling_mean_numpy(a: np.ndarray, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.full_like(a, np.nan)
    if k > a.shape[-1]:
        return out
    win = np.lib.stride_tricks.sliding_window_view(a, k, axis=-1)
    out[..., k - 1 :] = win.mean(axis=-1)
    return out


def rolling_std_numpy(a: np.ndarray, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.full_like(a, np.nan)
    if k > a.shape[-1]:
        return out
    win = np.lib.stride_tricks.sliding_window_view(a, k, axis=-1)
    out[..., k - 1 :] = win.std(axis=-1)
    return out


def _rolling_mean_loop(a, k):
    n_rows, n_cols = a.shape
    out = np.full((n_rows, n_cols), np.nan)
    for r in range(n_rows):
        for t in range(k - 1, n_cols):
            s = 0.0
            for j in range(t - k + 1, t + 1):
                s += a[r, j]
            out[r, t] = s / k
    return out


def _rolling_std_loop(a, k):
    n_rows, n_cols = a.shape
    out = np.full((n_rows, n_cols), np.nan)
    for r in range(n_rows):
        for t in range(k - 1, n_cols):
            s = 0.0
            for j in range(t - k + 1, t + 1):
                s += a[r, j]
            mu = s / k
            ss = 0.0
            for j in range(t - k + 1, t + 1):
                d = a[r, j] - mu
                ss += d * d
            out[r, t] = np.sqrt(ss / k)
    return out


# ---------------------------------------------------------------------------
# exponential moving average, recursion seeded at each row's first finite value
# ---------------------------------------------------------------------------


def ema_rows_numpy(a: np.ndarray, alpha: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    out = np.full_like(a, np.nan)
    for r in range(a.shape[0]):
        finite = np.flatnonzero(np.isfinite(a[r]))
        if finite.size == 0:
            continue
        start = finite[0]
        prev = a[r, start]
        out[r, start] = prev
        for t in range(start + 1, a.shape[1]):
            x = a[r, t]
            if not np.isfinite(x):
                break
            prev = alpha * x + (1.0 - alpha) * prev
            out[r, t] = prev
    return out


def _ema_rows_loop(a, alpha):
    n_rows, n_cols = a.shape
    out = np.full((n_rows, n_cols), np.nan)
    for r in range(n_rows):
        start = -1
        for t in range(n_cols):
            if np.isfinite(a[r, t]):
                start = t
                break
        if start < 0:
            continue
        prev = a[r, start]
        out[r, start] = prev
        for t in range(start + 1, n_cols):
            x = a[r, t]
            if not np.isfinite(x):
                break
            prev = alpha * x + (1.0 - alpha) * prev
            out[r, t] = prev
    return out


# ---------------------------------------------------------------------------
# best second-order split along one pre-sorted feature column
# returns (gain, index i) meaning "left = first i+1 sorted rows"; gain <= 0
# means no admissible split
# ---------------------------------------------------------------------------


def split_scan_numpy(xs, g, h, lam, min_child_weight):
    n = xs.shape[0]
    if n < 2:
        return 0.0, -1
    gl = np.cumsum(g)[:-1]
    hl = np.cumsum(h)[:-1]
    gt, ht = gl[-1] + g[-1], hl[-1] + h[-1]
    gr, hr = gt - gl, ht - hl
    ok = (xs[1:] > xs[:-1]) & (hl >= min_child_weight) & (hr >= min_child_weight)
    if not ok.any():
        return 0.0, -1
    gain = gl**2 / (hl + lam) + gr**2 / (hr + lam) - gt**2 / (ht + lam)
    gain = np.where(ok, gain, -np.inf)
    i = int(np.argmax(gain))
    return float(gain[i]), i


def _split_scan_loop(xs, g, h, lam, min_child_weight):
    n = xs.shape[0]
    gt = 0.0
    ht = 0.0
    for i in range(n):
        gt += g[i]
        ht += h[i]
    parent = gt * gt / (ht + lam)
    best = -np.inf
    best_i = -1
    gl = 0.0
    hl = 0.0
    for i in range(n - 1):
        gl += g[i]
        hl += h[i]
        if xs[i + 1] <= xs[i]:
            continue
        hr = ht - hl
        if hl < min_child_weight or hr < min_child_weight:
            continue
        gr = gt - gl
        gain = gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent
        if gain > best:
            best = gain
            best_i = i
    if best_i < 0:
        return 0.0, -1
    return best, best_i


if HAVE_NUMBA:
    _njit = numba.njit(cache=True, nogil=True)
    rank_rows_numba = _njit(_rank_rows_loop)
    rolling_mean_numba = _njit(_rolling_mean_loop)
    rolling_std_numba = _njit(_rolling_std_loop)
    ema_rows_numba = _njit(_ema_rows_loop)
    split_scan_numba = _njit(_split_scan_loop)
else:  # pragma: no cover
    rank_rows_numba = rank_rows_numpy
    rolling_mean_numba = rolling_mean_numpy
    rolling_std_numba = rolling_std_numpy
    ema_rows_numba = ema_rows_numpy
    split_scan_numba = split_scan_numpy


def _as2d(fn):
    def wrapped(a, *args):
        a = np.ascontiguousarray(a, dtype=np.float64)
        if a.ndim == 2:
            return fn(a, *args)
        lead = a.shape[:-1]
        out = fn(a.reshape(-1, a.shape[-1]), *args)
        return out.reshape(*lead, a.shape[-1])

    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


if USE_JIT:
    rank_rows = _as2d(rank_rows_numba)
    rolling_mean = _as2d(rolling_mean_numba)
    rolling_std = _as2d(rolling_std_numba)
    ema_rows = _as2d(ema_rows_numba)

    def split_scan(xs, g, h, lam, min_child_weight):
        gain, i = split_scan_numba(
            np.ascontiguousarray(xs, dtype=np.float64),
            np.ascontiguousarray(g, dtype=np.float64),
            np.ascontiguousarray(h, dtype=np.float64),
            float(lam),
            float(min_child_weight),
        )
        return float(gain), int(i)

else:
    rank_rows = _as2d(rank_rows_numpy)
    rolling_mean = _as2d(rolling_mean_numpy)
    rolling_std = _as2d(rolling_std_numpy)
    ema_rows = _as2d(ema_rows_numpy)
    split_scan = split_scan_numpy
