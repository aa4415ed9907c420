"""Smooth rank surrogate and the negative-mean-IC training loss.

The surrogate squashes each cross-section through a logistic of its own
z-score, ``g(x) = 1 / (1 + exp(-s * (x - mean) / (2 * std)))``; the daily IC
is the Pearson correlation of g(x) with g(y), and the loss is minus its mean
over the sampled days.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

STD_EPS = 1e-8
# a g-vector whose spread falls below this is treated as constant
DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class RankKernelParams:
    steepness: float = 1.83

    def __post_init__(self):
        if not self.steepness > 0:
            raise ValueError("steepness must be > 0")


DEFAULT_KERNEL = RankKernelParams()


class IcSample(NamedTuple):
    x: np.ndarray  # factor values, length m
    y: np.ndarray  # forward returns, length m


class LossResult(NamedTuple):
    loss: float
    ics: np.ndarray
    degenerate: int


def _zscore(v: np.ndarray) -> tuple[np.ndarray, float, bool]:
    sd = float(v.std())
    return (v - v.mean()) / max(sd, STD_EPS), max(sd, STD_EPS), sd >= STD_EPS


def rank_kernel(values, k: RankKernelParams = DEFAULT_KERNEL) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("rank kernel needs at least 2 values")
    u, _, _ = _zscore(v)
    return 1.0 / (1.0 + np.exp(-k.steepness * u / 2.0))


def _pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da * da)), np.sqrt(np.mean(db * db))
    if sa < DEGENERATE_STD or sb < DEGENERATE_STD:
        return 0.0, True
    r = float(np.mean(da * db) / (sa * sb))
    return min(1.0, max(-1.0, r)), False


def ic(x, y, k: RankKernelParams = DEFAULT_KERNEL) -> tuple[float, bool]:
    """Smooth IC of one day; returns (value, degenerate_flag)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("ic needs two equal-length vectors of length >= 2")
    return _pearson(rank_kernel(x, k), rank_kernel(y, k))


def loss(samples: Sequence[IcSample], k: RankKernelParams = DEFAULT_KERNEL) -> LossResult:
    if len(samples) == 0:
        raise ValueError("loss needs at least one day (q >= 1)")
    ics = np.empty(len(samples))
    degenerate = 0
    for i, s in enumerate(samples):
        ics[i], flag = ic(s.x, s.y, k)
        degenerate += flag
    return LossResult(-float(ics.mean()), ics, degenerate)


def _ic_grad(x: np.ndarray, y: np.ndarray, k: RankKernelParams) -> tuple[float, np.ndarray, bool]:
    m = x.size
    u, sx, ok = _zscore(x)
    a = 1.0 / (1.0 + np.exp(-k.steepness * u / 2.0))
    b = rank_kernel(y, k)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da * da)), np.sqrt(np.mean(db * db))
    if not ok or sa < DEGENERATE_STD or sb < DEGENERATE_STD:
        return 0.0, np.zeros(m), True
    r = float(np.mean(da * db) / (sa * sb))
    d_a = db / (m * sa * sb) - r * da / (m * sa * sa)
    d_u = d_a * a * (1.0 - a) * (k.steepness / 2.0)
    # u = (x - mean) / std with mean and std both functions of x
    d_x = (d_u - d_u.mean() - u * np.mean(d_u * u)) / sx
    return r, d_x, False


def loss_grad(samples: Sequence[IcSample], k: RankKernelParams = DEFAULT_KERNEL) -> tuple[LossResult, list[np.ndarray]]:
    """Loss plus d(loss)/d(x_i) for each day; degenerate days get zero gradient."""
    q = len(samples)
    if q == 0:
        raise ValueError("loss needs at least one day (q >= 1)")
    ics = np.empty(q)
    grads = []
    degenerate = 0
    for i, s in enumerate(samples):
        r, g, flag = _ic_grad(np.asarray(s.x, np.float64), np.asarray(s.y, np.float64), k)
        ics[i] = r
        degenerate += flag
        grads.append(-g / q)
    return LossResult(-float(ics.mean()), ics, degenerate), grads
