import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from alphamine.analysis import (
    center_spread,
    daily_spearman,
    distance_matrix,
    diversity_distance,
    diversity_report,
    diversity_score,
    kmeans,
    mds_2d,
    scheme_report,
    softmax,
    spearman_ic,
    summarize_ic,
)


def test_spearman_examples():
    assert spearman_ic([1, 2, 3], [10, 20, 30]).value == pytest.approx(1.0)
    assert spearman_ic([1, 2, 3], [3, 1, 2]).value == pytest.approx(-0.5)
    v = spearman_ic([2, 2, 2], [1, 2, 3])
    assert v.value == 0.0 and v.degenerate
    with pytest.raises(ValueError):
        spearman_ic([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 40))
def test_spearman_matches_scipy_with_ties(seed, m):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5, m).astype(float)
    y = rng.standard_normal(m)
    got = spearman_ic(x, y)
    if np.all(x == x[0]):
        assert got.degenerate
    else:
        assert got.value == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)


def test_spearman_monotone_invariance():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(30), rng.standard_normal(30)
    base = spearman_ic(x, y).value
    assert spearman_ic(np.exp(x), y).value == pytest.approx(base, abs=1e-12)
    assert spearman_ic(x, y**3).value == pytest.approx(base, abs=1e-12)


def test_daily_spearman_mixed_rows():
    rng = np.random.default_rng(1)
    v, r = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    v[2, 1] = np.nan
    r[:, 3] = np.nan
    r[0, 3] = 1.0
    out = daily_spearman(v, r, range(4))
    assert out[0].value == pytest.approx(stats.spearmanr(v[:, 0], r[:, 0]).statistic, abs=1e-12)
    ok = np.isfinite(v[:, 1])
    assert out[1].value == pytest.approx(stats.spearmanr(v[ok, 1], r[ok, 1]).statistic, abs=1e-12)
    assert out[3] is None
    s = summarize_ic(out)
    assert s.days == 3


def test_distance_examples():
    f = np.array([0.3, -1.0, 2.0])
    p = softmax(f)
    assert diversity_distance(f, f) == pytest.approx(-(p * np.log(p)).sum(), abs=1e-14)
    assert diversity_distance([0.0, 0.0], [0.0, math.log(3)]) == pytest.approx(
        0.5 * math.log(4) + 0.5 * math.log(4 / 3), abs=1e-12
    )
    assert diversity_distance([0.0, 0.0], [0.0, math.log(3)]) == pytest.approx(0.8370, abs=1e-4)
    with pytest.raises(ValueError):
        diversity_distance([1.0, 2.0], [1.0])


def test_gibbs_inequality_random_pairs():
    rng = np.random.default_rng(2)
    worst = min(
        diversity_distance(a, b) - diversity_distance(a, a)
        for a, b in (rng.standard_normal((2, int(rng.integers(2, 60)))) * rng.uniform(0.1, 5) for _ in range(1000))
    )
    assert worst >= -1e-12


def test_distance_matrix_diagonal_is_entropy():
    rng = np.random.default_rng(3)
    F = rng.standard_normal((4, 12))
    D = distance_matrix(F, standardize=False)
    for i in range(4):
        for j in range(4):
            assert D[i, j] == pytest.approx(diversity_distance(F[i], F[j]), abs=1e-12)
    assert np.all(D >= 0)


def test_kmeans_blobs_and_determinism():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    res = kmeans(pts, 2, seed=0)
    centers = sorted(map(tuple, res.centers))
    assert centers == [(0.0, 0.5), (10.0, 10.5)]
    again = kmeans(pts, 2, seed=0)
    assert np.array_equal(res.assignments, again.assignments)
    with pytest.raises(ValueError):
        kmeans(pts, 5)


def test_kmeans_inertia_non_increasing():
    rng = np.random.default_rng(4)
    pts = rng.standard_normal((60, 3))
    for seed in range(5):
        tr = kmeans(pts, 4, seed).inertia_trace
        assert all(b <= a + 1e-9 for a, b in zip(tr, tr[1:]))


def test_k_equals_points_gives_mean_pairwise_distance():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((4, 3))
    res = kmeans(pts, 4, 0)
    d = [np.linalg.norm(pts[i] - pts[j]) for i in range(4) for j in range(i + 1, 4)]
    assert center_spread(res.centers) == pytest.approx(np.mean(d), abs=1e-12)


def test_diversity_identical_factors_zero_and_order_invariant():
    rng = np.random.default_rng(6)
    f = rng.standard_normal(30)
    assert diversity_score(np.tile(f, (5, 1)), 3) == pytest.approx(0.0, abs=1e-12)
    F = rng.standard_normal((8, 30))
    s = diversity_score(F, 3, seed=0)
    perm = rng.permutation(8)
    assert diversity_score(F[perm], 3, seed=0) == pytest.approx(s, rel=1e-9)
    with pytest.raises(ValueError):
        diversity_score(F[:2], 3)


def test_diversity_distinct_indicators_beat_noisy_copies(planted):
    from alphamine.indicators import DEFAULT_CATALOG, indicator_values

    _, sp, (_, _, test) = planted
    t = test.start + 10
    distinct = np.stack([indicator_values(s, sp)[:, t] for s in DEFAULT_CATALOG])
    rng = np.random.default_rng(7)
    base = distinct[0]
    copies = np.stack([base + 0.01 * base.std() * rng.standard_normal(base.size) for _ in range(10)])
    assert diversity_score(distinct) > diversity_score(copies)


def test_report_fields():
    rep = diversity_report(np.random.default_rng(8).standard_normal((6, 20)), 3, 0)
    assert rep.distances.shape == (6, 6) and rep.assignments.shape == (6,) and rep.k == 3


def test_mds_recovers_line():
    x = np.array([0.0, 1.0, 3.0, 7.0])
    D = np.abs(x[:, None] - x[None, :])
    c = mds_2d(D)
    np.testing.assert_allclose(np.abs(c[:, 0][:, None] - c[:, 0][None, :]), D, atol=1e-9)


def test_scheme_report_passthrough_and_errors(planted):
    from alphamine.market_data import forward_returns, planted_signal

    panel, _, (_, _, test) = planted
    ret = forward_returns(panel, 5)
    oracle = planted_signal(panel)
    rows = scheme_report({"oracle": [oracle], "again": [oracle]}, ret, test, with_diversity=False)
    expect = summarize_ic(daily_spearman(oracle, ret, test)).mean
    assert rows[0].mean_ic == pytest.approx(expect, abs=1e-15)
    assert rows[0][1:] == rows[1][1:] if hasattr(rows[0], "__getitem__") else rows[0].mean_ic == rows[1].mean_ic
    with pytest.raises(ValueError):
        scheme_report({"x": [oracle]}, ret, [])
    with pytest.raises(ValueError):
        scheme_report({"x": []}, ret, test)
