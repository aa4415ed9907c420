import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alphamine import gp_baseline as gp
from alphamine.market_data import DataError, DayBatch, SplitSpec, SynthConfig, generate_synthetic, split, standardize


def toy_batch(n=3):
    # stock 0 / stock 1; series order open, high, low, close, volume; oldest first
    inputs = np.zeros((2, 5, n))
    inputs[0, 1] = [1.0, 2.0, 4.0][-n:]  # high
    inputs[0, 2] = [0.0, 1.0, 1.0][-n:]  # low
    inputs[0, 4] = [5.0, 2.0, 8.0][-n:]  # volume
    inputs[1, 1] = [3.0, 3.0, 3.0][-n:]
    inputs[1, 2] = [1.0, 1.0, 2.0][-n:]
    inputs[1, 4] = [1.0, 4.0, 9.0][-n:]
    return DayBatch("2021-01-01", n - 1, ("A", "B"), np.arange(2), inputs, np.zeros(2))


def test_formula_by_hand():
    v = gp.eval_expr(gp.FORMULA_1, toy_batch())
    # (high - low) / volume one day earlier
    np.testing.assert_allclose(v, [(4.0 - 1.0) / 2.0, (3.0 - 2.0) / 4.0])
    assert gp.lookback(gp.FORMULA_1) == 1 and gp.depth(gp.FORMULA_1) == 3


def test_constant_and_protected_div():
    b = toy_batch()
    np.testing.assert_array_equal(gp.eval_expr(gp.const(2.5), b), [2.5, 2.5])
    e = gp.parse("(div high (sub low low))")
    np.testing.assert_array_equal(gp.eval_expr(e, b), [1.0, 1.0])
    assert gp.parse("(protected_div high low)") == gp.parse("(div high low)")


def test_lookback_beyond_window_raises():
    with pytest.raises(DataError):
        gp.eval_expr(gp.parse("(delta close 5)"), toy_batch())


def test_windowed_ops():
    x = np.array([[1.0, 2.0, 4.0, 7.0]])
    s = {k: x for k in ("open", "high", "low", "close", "volume")}
    np.testing.assert_allclose(gp.eval_series(gp.parse("(delta close 1)"), s), [[np.nan, 1, 2, 3]])
    np.testing.assert_allclose(gp.eval_series(gp.parse("(ts_mean close 3)"), s), [[np.nan, np.nan, 7 / 3, 13 / 3]])
    np.testing.assert_allclose(gp.eval_series(gp.parse("(ts_std close 1)"), s), [[0, 0, 0, 0]])
    assert gp.lookback(gp.parse("(ts_mean (shift close 3) 5)")) == 7


def test_sexpr_roundtrip_and_errors():
    for text in ("(neg (delta close 5))", "(max (ts_std volume 10) -1.5)", "open"):
        assert gp.to_sexpr(gp.parse(text)) == text
    for bad in ("(add close)", "(delta close 7)", "(foo close)", "(add close open", "close)"):
        with pytest.raises(ValueError):
            gp.parse(bad)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 6))
def test_random_expr_respects_bounds(seed, d):
    e = gp.random_expr(np.random.default_rng(seed), d, 29, "grow" if seed % 2 else "full")
    assert gp.depth(e) <= d and gp.lookback(e) <= 29
    assert gp.parse(gp.to_sexpr(e)) == e


def test_crossover_of_two_leaves_swaps_them():
    a, b = gp.leaf("close"), gp.leaf("volume")
    assert gp.crossover(a, b, np.random.default_rng(0)) == (b, a)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_variation_keeps_depth_and_lookback(seed):
    rng = np.random.default_rng(seed)
    a, b = gp.random_expr(rng, 6), gp.random_expr(rng, 6)
    for c in (*gp.crossover(a, b, rng, 6, 29), gp.mutate(a, rng, 6, 29)):
        assert gp.is_valid(c, 6, 29)


def test_second_formula_one_mutation_away():
    target = gp.to_sexpr(gp.FORMULA_2)
    hits = [s for s in range(3000) if gp.to_sexpr(gp.mutate(gp.FORMULA_1, np.random.default_rng(s))) == target]
    assert hits


def test_commutative_normalization():
    e1, e2 = gp.parse("(add close (mul volume high))"), gp.parse("(add (mul high volume) close)")
    assert gp.normalize(e1) == gp.normalize(e2)
    b = toy_batch()
    np.testing.assert_array_equal(gp.eval_expr(e1, b), gp.eval_expr(e2, b))


def test_stock_permutation_equivariance():
    b = toy_batch()
    flipped = DayBatch(b.date, b.day, b.tickers[::-1], b.rows[::-1], b.inputs[::-1].copy(), b.forward_returns)
    e = gp.parse("(sub (ts_mean high 3) (shift low 1))")
    np.testing.assert_array_equal(gp.eval_expr(e, flipped), gp.eval_expr(e, b)[::-1])


@pytest.fixture(scope="module")
def small():
    panel = generate_synthetic(SynthConfig(tickers=20, days=320, seed=5))
    train, val, test = split(panel, SplitSpec(200, 30, 60))
    return standardize(panel, train), (train, val, test)


CFG = gp.GpConfig(population=20, generations=3, elitism=2, window=10, seed=1)


def test_constant_population_scores_zero(small):
    sp, (train, val, _) = small
    results, history = gp.evolve(sp, train, val, gp.GpConfig(population=5, generations=0, elitism=1, window=10), [gp.const(1.0)] * 5)
    assert history == [0.0] and len(results) == 1 and results[0].train_ic == 0.0


def test_elitism_keeps_best_and_runs_are_deterministic(small):
    sp, (train, val, _) = small
    r1, h1 = gp.evolve(sp, train, val, CFG)
    r2, h2 = gp.evolve(sp, train, val, CFG)
    assert len(h1) == CFG.generations + 1
    assert all(b >= a for a, b in zip(h1, h1[1:]))
    assert h1 == h2 and [gp.to_sexpr(r.expr) for r in r1] == [gp.to_sexpr(r.expr) for r in r2]
    vals = [r.val_ic for r in r1]
    assert vals == sorted(vals, reverse=True)


def test_fitness_matches_direct_ic(small):
    from alphamine.analysis import daily_spearman, summarize_ic
    from alphamine.market_data import forward_returns, range_days

    sp, (train, _, _) = small
    days = range_days(sp, train, 10, 5)
    direct = summarize_ic(daily_spearman(gp.expr_values(gp.REVERSAL, sp, 10), forward_returns(sp, 5), days)).mean
    assert gp.expr_ic(gp.REVERSAL, sp, train, 10) == pytest.approx(direct, abs=1e-15)
    assert gp.expr_ic(gp.REVERSAL, sp, train, 10) > 0.1
