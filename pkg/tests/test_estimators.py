import numpy as np
import pytest

from costate_lab import autodiff as ad
from costate_lab import estimators as es


def rng(seed):
    return np.random.default_rng(seed)


def test_sf_constant_reward_has_zero_mean():
    m, se = es.sf_estimate(es.scalar_spec("const"), [0.4], 20_000, rng(0))
    assert abs(m[0]) < 3 * se[0]


def test_sf_linear_reward_analytic():
    # E[a (a - theta) / sigma^2] = 1
    m, se = es.sf_estimate(es.scalar_spec("linear"), [0.0], 20_000, rng(1))
    assert abs(m[0] - 1.0) < 3 * se[0]


def test_sf_square_reward_analytic():
    m, se = es.sf_estimate(es.scalar_spec("square"), [1.0], 50_000, rng(2))
    assert abs(m[0] - 2.0) < 3 * se[0]


def test_pd_linear_is_exact():
    m, se = es.pd_estimate(es.scalar_spec("linear"), [0.7], 100, rng(3))
    assert m[0] == 1.0 and se[0] == 0.0


def test_pd_square_analytic():
    m, se = es.pd_estimate(es.scalar_spec("square"), [1.0], 20_000, rng(4))
    assert abs(m[0] - 2.0) < 3 * se[0]


def test_pd_constant_is_exactly_zero():
    m, se = es.pd_estimate(es.scalar_spec("const"), [1.0], 50, rng(5))
    assert m[0] == 0.0 and se[0] == 0.0


def test_n_must_be_at_least_two():
    with pytest.raises(ValueError):
        es.sf_estimate(es.scalar_spec("linear"), [0.0], 1, rng(0))


def test_bridge_square_passes_near_two():
    rep = es.bridge_gap(es.scalar_spec("square"), [1.0], 20_000, rng(6))
    assert rep.passed
    assert abs(rep.sf_mean[0] - 2) < 0.2 and abs(rep.pd_mean[0] - 2) < 0.1


def test_bridge_sin_analytic():
    rep = es.bridge_gap(es.scalar_spec("sin", 0.5), [0.3], 100_000, rng(7))
    assert rep.passed
    exact = np.cos(0.3) * np.exp(-0.5**2 / 2)
    assert abs(rep.pd_mean[0] - exact) < 4 * rep.se[0]


def test_small_sigma_pd_variance_much_lower():
    rep = es.bridge_gap(es.scalar_spec("square", 1e-3), [1.0], 2_000, rng(8))
    assert rep.variance_ratio[0] > 10


@pytest.mark.parametrize("kind,theta,sigma", [("linear", 0.0, 1.0), ("square", 1.0, 1.0), ("sin", 0.3, 0.5)])
def test_bridge_agreement_ten_seeds(kind, theta, sigma):
    for seed in range(10):
        assert es.bridge_gap(es.scalar_spec(kind, sigma), [theta], 20_000, rng(100 + seed)).passed


def test_sf_constant_shrinks_with_n():
    means = []
    for n in (1_000, 10_000, 100_000):
        m, se = es.sf_estimate(es.scalar_spec("const"), [0.0], n, rng(n))
        means.append(abs(m[0]))
    assert means[-1] < 3 * se[0]


def test_weighted_bridge_zero_weight():
    rep = es.weighted_bridge(es.scalar_spec("square"), 0.0, [1.0], 100, rng(9))
    assert np.all(rep.sf_mean == 0) and np.all(rep.pd_mean == 0)


def test_weighted_bridge_unit_weight_matches_bridge():
    a = es.weighted_bridge(es.scalar_spec("square"), 1.0, [1.0], 5_000, rng(10))
    b = es.bridge_gap(es.scalar_spec("square"), [1.0], 5_000, rng(10))
    np.testing.assert_allclose(a.sf_mean, b.sf_mean, rtol=1e-14)
    np.testing.assert_allclose(a.pd_mean, b.pd_mean, rtol=1e-14)


def test_weighted_bridge_negative_scaling():
    rep = es.weighted_bridge(es.scalar_spec("square"), -2.5, [1.0], 50_000, rng(11))
    assert rep.passed
    assert abs(rep.pd_mean[0] + 5.0) < 4 * rep.se[0] + 0.05


def test_weight_linearity():
    a = es.weighted_bridge(es.scalar_spec("sin", 0.5), 1.3, [0.3], 10_000, rng(12))
    b = es.weighted_bridge(es.scalar_spec("sin", 0.5), 2.6, [0.3], 10_000, rng(12))
    np.testing.assert_allclose(b.sf_mean, 2 * a.sf_mean, rtol=1e-12)
    np.testing.assert_allclose(b.pd_mean, 2 * a.pd_mean, rtol=1e-12)


def test_weight_is_not_differentiated():
    # a per-sample weight that happens to equal a function of the action must still act as a constant
    spec = es.scalar_spec("linear")
    r = rng(13)
    mu, a = es._draw(spec, np.array([0.2]), 1000, r)
    w = a[:, 0] ** 2
    pd = es.pd_samples(spec, np.array([0.2]), a, w)
    np.testing.assert_allclose(pd[:, 0], w, rtol=1e-14)


def test_vector_parameter_bridge():
    W = np.array([[1.0, -0.5, 0.2], [0.3, 0.8, -1.0]])

    def mean(th):
        return ad.tanh(ad.matmul(th.reshape(1, 3), W.T)).reshape(2)

    def reward(a):
        return ad.sin(a[:, 0]) * a[:, 1] - 0.5 * a[:, 1] * a[:, 1]

    spec = es.BanditSpec(reward, mean, 0.4)
    rep = es.bridge_gap(spec, [0.1, -0.3, 0.5], 100_000, rng(14))
    assert rep.passed and rep.sf_mean.shape == (3,)
