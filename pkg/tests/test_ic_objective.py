import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alphamine.ic_objective import IcSample, RankKernelParams, ic, loss, loss_grad, rank_kernel

LOGISTIC_183 = 1.0 / (1.0 + math.exp(-1.83))


def test_kernel_at_mean_and_two_std():
    assert rank_kernel(np.array([1.0, 2.0, 3.0]))[1] == pytest.approx(0.5, abs=1e-12)
    x = np.array([2.0, -0.5, -0.5, -0.5, -0.5])  # mean 0, std 1 -> first at mean + 2 std
    assert x.mean() == 0 and x.std() == 1
    assert rank_kernel(x)[0] == pytest.approx(LOGISTIC_183, abs=1e-9)
    assert LOGISTIC_183 == pytest.approx(0.86176, abs=1e-5)


def test_kernel_negation_and_constant():
    x = np.random.default_rng(0).standard_normal(30)
    np.testing.assert_allclose(rank_kernel(-x), 1 - rank_kernel(x), atol=1e-15)
    np.testing.assert_array_equal(rank_kernel(np.full(5, 3.0)), 0.5)
    with pytest.raises(ValueError):
        rank_kernel([1.0])
    with pytest.raises(ValueError):
        RankKernelParams(0.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(-1e6, 1e6)))
def test_kernel_monotone(x):
    g = rank_kernel(x)
    assert np.all((g > 0) & (g < 1))
    if x.std() > 1e-8:
        order = np.argsort(x, kind="stable")
        xs, gs = x[order], g[order]
        strict = xs[1:] > xs[:-1]
        assert np.all(gs[1:][strict] >= gs[:-1][strict])


def test_ic_examples():
    x = np.random.default_rng(1).standard_normal(25)
    assert ic(x, x)[0] == pytest.approx(1.0, abs=1e-12)
    assert ic(x, -x)[0] == pytest.approx(-1.0, abs=1e-12)
    assert ic(x, 3.0 * x + 7.0)[0] == pytest.approx(1.0, abs=1e-12)
    y = np.random.default_rng(2).standard_normal(25)
    assert ic(x, y)[0] == pytest.approx(ic(y, x)[0], abs=1e-15)
    v, deg = ic(np.ones(5), y[:5])
    assert v == 0.0 and deg


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_ic_bounded(seed, m):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(m) * rng.uniform(0.01, 100), rng.standard_normal(m)
    assert abs(ic(x, y)[0]) <= 1 + 1e-12


def test_loss_examples():
    x = np.random.default_rng(3).standard_normal(10)
    assert loss([IcSample(x, x)]).loss == pytest.approx(-1.0)
    assert loss([IcSample(x, x), IcSample(x, -x)]).loss == pytest.approx(0.0, abs=1e-12)
    res = loss([IcSample(np.ones(4), x[:4]), IcSample(np.zeros(4), x[:4])])
    assert res.loss == 0.0 and res.degenerate == 2
    with pytest.raises(ValueError):
        loss([])


def _fd_grad(samples, day, step=1e-6):
    x = samples[day].x
    out = np.empty_like(x)
    for j in range(x.size):
        up, dn = x.copy(), x.copy()
        up[j] += step
        dn[j] -= step
        s_up = list(samples)
        s_up[day] = IcSample(up, samples[day].y)
        s_dn = list(samples)
        s_dn[day] = IcSample(dn, samples[day].y)
        out[j] = (loss(s_up).loss - loss(s_dn).loss) / (2 * step)
    return out


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    samples = [IcSample(rng.standard_normal(20), rng.standard_normal(20)) for _ in range(3)]
    res, grads = loss_grad(samples)
    assert res.loss == pytest.approx(loss(samples).loss, abs=1e-15)
    for d in range(3):
        fd = _fd_grad(samples, d)
        rel = np.abs(grads[d] - fd) / np.maximum(np.maximum(np.abs(grads[d]), np.abs(fd)), 1e-8)
        assert rel.max() <= 1e-5


def test_grad_vanishes_at_optimum_and_degenerate():
    x = np.random.default_rng(5).standard_normal(20)
    _, g = loss_grad([IcSample(x, x)])
    assert np.abs(g[0]).max() <= 1e-6
    _, g = loss_grad([IcSample(np.ones(6), x[:6])])
    assert np.all(g[0] == 0.0)


def test_scaling_x_keeps_loss():
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal(20), rng.standard_normal(20)
    (r1, g1), (r2, g2) = loss_grad([IcSample(x, y)]), loss_grad([IcSample(2 * x, y)])
    assert r1.loss == pytest.approx(r2.loss, abs=1e-12)
    np.testing.assert_allclose(g2[0], g1[0] / 2, atol=1e-12)


def test_gradient_descent_decreases_loss():
    rng = np.random.default_rng(7)
    x, y = rng.standard_normal(30), rng.standard_normal(30)
    prev = loss([IcSample(x, y)]).loss
    drops = 0
    for _ in range(50):
        _, g = loss_grad([IcSample(x, y)])
        x = x - 1e-2 * g[0]
        cur = loss([IcSample(x, y)]).loss
        drops += cur < prev
        prev = cur
    assert drops >= 45


def test_permutation_invariance():
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal(15), rng.standard_normal(15)
    perm = rng.permutation(15)
    assert loss([IcSample(x, y)]).loss == pytest.approx(loss([IcSample(x[perm], y[perm])]).loss, abs=1e-14)
