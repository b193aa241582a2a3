import math
import warnings

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from costate_lab import analysis as an
from costate_lab import autodiff as ad
from costate_lab import readiness as rd
from costate_lab import transformer as tf

SMALL = tf.ModelConfig(n_layers=2, d_model=16, n_heads=2, d_head=8, vocab_size=8, max_seq_len=12)


def _ckpt(seed=0, scale=0.4):
    r = np.random.default_rng(seed)
    ck = tf.init_checkpoint(SMALL, r)
    return ck.with_params(ck.params + scale * r.standard_normal(ck.params.size) * (ck.params != 1.0))


def _prompts(n, seed=0, P=5):
    r = np.random.default_rng(seed)
    p = r.integers(0, 4, (n, P))
    y = r.integers(4, 8, n)
    p[:, 1] = y
    return p, y


def _taped(ck, tokens, n_prefix=None):
    tape = ad.Tape()
    n_prefix = len(tokens) if n_prefix is None else n_prefix
    with tape:
        return tf.run_trace(tf.bind(ck, tape), SMALL, tokens, n_prefix, tape)


# ----------------------------------------------------------------- G and lambda


def test_G_zero_after_answer_position():
    ck = _ckpt()
    q, y = _prompts(1)
    tr = _taped(ck, np.append(q[0], [5, 6]))
    R = rd.label_probability(tr, y[0], pos=q.shape[1] - 1)
    G = rd.true_costate_G(tr, R)
    assert np.all(G[q.shape[1]:] == 0) and np.any(G[: q.shape[1]] != 0)


def test_G_vanishes_on_saturated_head():
    ck = _ckpt(1)
    q, _ = _prompts(1, 1)
    ck = ck.with_array("head_b", ck.arrays()["head_b"] + 80.0 * (np.arange(8) == 6))
    tr = _taped(ck, q[0])
    R = rd.label_probability(tr, 6)
    assert abs(float(R.data) - 1.0) < 1e-15
    assert np.abs(rd.true_costate_G(tr, R)).max() < 1e-12


@pytest.mark.parametrize("t", [0, 2, 4])
def test_G_directional_fd(t):
    ck = _ckpt(2)
    q, y = _prompts(1, 2)
    tr = _taped(ck, q[0])
    probe = an.CostateProbe()
    l = probe.anchor(SMALL)
    G = rd.true_costate_G(tr, rd.label_probability(tr, y[0]), probe)
    v = np.random.default_rng(t).standard_normal(SMALL.d_model)
    eps = 1e-4

    def R(s):
        g = an.replay(tr, perturb={(t, l): (s * v).reshape(1, -1)})
        return float(rd.label_probability(g, y[0]).data)

    fd = (R(eps) - R(-eps)) / (2 * eps)
    assert abs(fd - G[t] @ v) <= 1e-3 * abs(G[t] @ v)


def test_G_requires_tape_node():
    ck = _ckpt()
    tr = _taped(ck, _prompts(1)[0][0])
    with pytest.raises(ad.TapeError):
        rd.true_costate_G(tr, ad.Tensor(np.array(0.3)))


def test_rl_costate_zero_single_and_linear():
    ck = _ckpt(3)
    q, _ = _prompts(1, 3)
    tr = _taped(ck, np.append(q[0], [4, 5, 6]), q.shape[1])
    n = len(tr.action_positions)
    assert np.all(rd.rl_costate(tr, np.zeros(n)) == 0)
    adv = np.zeros(n)
    adv[1] = 0.8
    lam = rd.rl_costate(tr, adv, positions=tr.action_positions)
    t = tr.action_positions[1]
    l = an.CostateProbe().anchor(SMALL)
    direct = 0.8 * tr.tape.backward(tr.logprob[1], wrt=[tr.h(t, l)])[tr.h(t, l)].reshape(-1)
    assert np.max(np.abs(lam[1] - direct)) < 1e-14
    a = np.random.default_rng(0).normal(size=n)
    assert np.max(np.abs(rd.rl_costate(tr, 3 * a) - 3 * rd.rl_costate(tr, a))) < 1e-13


def test_collect_inputs_matches_per_trajectory_route():
    ck = _ckpt(4)
    q, y = _prompts(3, 4)
    inp = rd.collect_inputs(ck, q, y, rd.ScoreConfig(group=4), np.random.default_rng(0))
    P = q.shape[1]
    for i in range(3):
        for j in range(4):
            tr = _taped(ck, np.append(q[i], inp.completions[i, j]), P)
            lam = rd.rl_costate(tr, [inp.advantages[i, j]], positions=range(P))
            assert np.max(np.abs(lam - inp.lam[i, j])) < 1e-13
        tr = _taped(ck, q[i])
        R = rd.label_probability(tr, y[i])
        assert abs(float(R.data) - inp.p_label[i]) < 1e-15
        assert np.max(np.abs(rd.true_costate_G(tr, R) - inp.G[i])) < 1e-15
    assert np.all(inp.rewards == (inp.completions == y[:, None]))


def test_collect_inputs_deterministic():
    ck = _ckpt(5)
    q, y = _prompts(2, 5)
    a = rd.collect_inputs(ck, q, y, rd.ScoreConfig(group=4), np.random.default_rng(3))
    b = rd.collect_inputs(ck, q, y, rd.ScoreConfig(group=4), np.random.default_rng(3))
    assert np.array_equal(a.lam, b.lam) and np.array_equal(a.G, b.G)


def test_advantage_modes():
    r = np.array([[1.0, 0.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]])
    c = rd.advantages_for(r, "centered")
    g = rd.advantages_for(r, "grpo")
    assert np.array_equal(c[0], [0.5, -0.5, -0.5, 0.5]) and np.all(c[1] == 0)
    assert np.max(np.abs(g[0] - [1, -1, -1, 1])) < 1e-7 and np.all(g[1] == 0)


# ----------------------------------------------------------------- Sigma, Lambda


def _inputs(G, lam_per_completion):
    n, Gs, P, d = lam_per_completion.shape
    return rd.ReadinessInputs(np.zeros((n, P), int), np.zeros(n, int), np.zeros(n), np.zeros((n, Gs), int),
                              np.zeros((n, Gs)), np.ones((n, Gs)), G, lam_per_completion, 1.0, 1)


def test_sigma_lambda_equal_costates():
    G = np.random.default_rng(0).normal(size=(3, 4, 5))
    inp = _inputs(G, np.repeat(G[:, None], 2, axis=1))
    for est in ("single", "group"):
        t = rd.sigma_lambda(inp, est)
        assert t.lambda_m == 0 and t.s_m == t.sigma


def test_sigma_lambda_zero_G():
    lam = np.random.default_rng(1).normal(size=(2, 3, 4, 5))
    t = rd.sigma_lambda(_inputs(np.zeros((2, 4, 5)), lam))
    assert t.sigma == 0 and t.lambda_m == 0


def test_sigma_lambda_hand_arithmetic():
    G = np.array([[3.0, 4.0], [1.0, 0.0]])
    lam = np.array([[3.0, 5.0], [-1.0, 0.0]])
    s, l = rd.sigma_lambda_pairs(G, lam)
    assert abs(s - 13.0) < 1e-12 and abs(l - 3.5) < 1e-12
    inp = _inputs(G.reshape(2, 1, 2), lam.reshape(2, 1, 1, 2))
    t = rd.sigma_lambda(inp, "single")
    assert abs(t.sigma - 13.0) < 1e-12 and abs(t.lambda_m - 3.5) < 1e-12


def test_group_estimator_averages_completions():
    G = np.zeros((1, 1, 2))
    lam = np.array([[[[1.0, 0.0]], [[-1.0, 2.0]]]])
    G[0, 0] = [1.0, 0.0]
    t = rd.sigma_lambda(_inputs(G, lam), "group")
    # group mean (0, 1): ||G|| = 1, distance to G = sqrt 2, inner product 0
    assert abs(t.lambda_m - math.sqrt(2)) < 1e-15
    assert abs(t.inner) < 1e-15


def test_sigma_lambda_empty():
    with pytest.raises(ValueError):
        rd.sigma_lambda_pairs(np.zeros((0, 3)), np.zeros((0, 3)))


def test_lower_bound_on_collected_inputs():
    ck = _ckpt(6)
    q, y = _prompts(6, 6)
    inp = rd.collect_inputs(ck, q, y, rd.ScoreConfig(group=6), np.random.default_rng(1))
    for mode in ("centered", "grpo"):
        alt = inp.with_advantage(mode)
        for est in ("single", "group"):
            t = rd.sigma_lambda(alt, est)
            assert t.inner - (t.sigma - t.lambda_m) >= -1e-10
            rows = rd.lambda_estimate(alt, est).reshape(-1, SMALL.d_model)
            Gb = np.broadcast_to(alt.G[:, None], alt.dlogp.shape).reshape(-1, SMALL.d_model)
            assert an.usable_signal_bound_check(rows, Gb).passed


# ----------------------------------------------------------------- headroom


def test_headroom_deterministic_zero():
    assert rd.headroom_from_rewards(np.full((3, 10), 0.7), 1.0) == 0.0
    assert rd.bernoulli_headroom([0.0, 1.0], 2.0) == 0.0


def test_headroom_two_point():
    h = rd.headroom_from_rewards(np.array([[0.0, 1.0]]), 1.0)
    assert abs(h - 0.12011) < 1e-5
    assert abs(h - (math.log((1 + math.e) / 2) - 0.5)) < 1e-15
    assert abs(rd.bernoulli_headroom(0.5, 1.0) - h) < 1e-15


def test_headroom_small_alpha_taylor():
    R = np.random.default_rng(0).random((4, 50))
    h = rd.headroom_from_rewards(R, 1e-3)
    var = R.var(axis=1).mean()
    assert abs(h / (0.5e-3 * var) - 1) < 0.01


def test_bernoulli_matches_empirical():
    R = np.array([[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 0.0]])
    assert abs(rd.bernoulli_headroom([0.25, 0.75], 1.5) - rd.headroom_from_rewards(R, 1.5)) < 1e-15


def test_bernoulli_large_alpha_finite():
    h = rd.bernoulli_headroom(0.3, 800.0)
    assert math.isfinite(h) and abs(h - (math.log(0.3) + 800) / 800 + 0.3) < 1e-12


def test_headroom_mc_converges_to_exact():
    ck = _ckpt(7)
    q, y = _prompts(4, 7)
    z = tf.forward_batch(tf.bind(ck), SMALL, q).logits.data[:, -1]
    p = np.exp(z - np.logaddexp.reduce(z, axis=1, keepdims=True))[np.arange(4), y]
    mc = rd.headroom(ck, q, 1.0, 20000, np.random.default_rng(0), lambda i, qq, a: float(a == y[i]))
    assert abs(mc - rd.bernoulli_headroom(p, 1.0)) < 5e-3


def test_headroom_alpha_zero_rejected():
    with pytest.raises(ValueError):
        rd.headroom_from_rewards(np.ones((1, 2)), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0.01, 50))
def test_headroom_nonnegative(r, alpha):
    assert rd.headroom_from_rewards(np.array([r]), alpha) >= 0.0
    assert rd.bernoulli_headroom(r, alpha) >= 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=20), st.floats(-20, -0.01))
def test_headroom_negative_alpha_nonpositive(r, alpha):
    assert rd.headroom_from_rewards(np.array([r]), alpha) <= 1e-12


# ----------------------------------------------------------------- impact, switch point


def test_impact_examples():
    assert rd.impact_score(2.0, 0.5, 0.0) == 0.0
    assert rd.impact_score(1.3, 1.3, 0.4) == 0.0
    assert abs(rd.impact_score(2.0, 0.5, 0.3) - 0.45) < 1e-15
    with pytest.raises(ValueError):
        rd.impact_score(float("nan"), 0.0, 1.0)


def _rep(step, s, h):
    return rd.ReadinessReport(step, s, 0.0, s, h, s * h, 0.5)


def test_best_switch_point():
    assert rd.best_switch_point([_rep(7, 1.0, 0.1)]).step == 7
    reps = [_rep(0, 0.1, 1.0), _rep(10, 0.5, 1.0), _rep(20, 0.3, 1.0)]
    assert rd.best_switch_point(reps).step == 10
    tie = [_rep(5, 0.5, 1.0), _rep(0, 0.5, 1.0)]
    assert rd.best_switch_point(tie).step == 0
    assert rd.argmax_earliest([0.1, 0.5, 0.3]) == 1 and rd.argmax_earliest([0.5, 0.5]) == 0
    with pytest.raises(ValueError):
        rd.best_switch_point([])


def test_with_gains_consistency():
    r = _rep(0, 1.0, 1.0)
    r.r_before = 0.2
    g = r.with_gains({10: 0.3, 20: 0.5, 25: 0.1, 30: 0.2})
    assert abs(g.mean_gain - np.mean([0.1, 0.3, -0.1, 0.0])) < 1e-12


# ----------------------------------------------------------------- statistics


def test_spearman_extremes():
    x = np.arange(7.0)
    assert rd.spearman(x, x**3) == 1.0
    assert rd.spearman(x, -x) == -1.0


def test_spearman_hand_tie_example():
    x = [1, 2, 2, 3, 4]
    y = [5, 3, 4, 1, 2]
    # ranks x: 1, 2.5, 2.5, 4, 5; deviations (-2,-.5,-.5,1,2) vs (2,0,1,-2,-1)
    expected = -8.5 / math.sqrt(9.5 * 10.0)
    assert abs(rd.spearman(x, y) - expected) < 1e-12
    assert abs(rd.spearman(x, y) - scipy.stats.spearmanr(x, y).statistic) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-40, 40)), min_size=3, max_size=25))
def test_spearman_matches_reference_and_is_monotone_invariant(pairs):
    x = np.array([p[0] for p in pairs], float)
    y = np.array([p[1] for p in pairs], float) / 8.0
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        assert math.isnan(rd.spearman(x, y))
        return
    ref = scipy.stats.spearmanr(x, y).statistic
    assert abs(rd.spearman(x, y) - ref) < 1e-12
    assert abs(rd.spearman(np.exp(x), 10 * y + 3) - rd.spearman(x, y)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_zscore_moments(x):
    x = np.array(x)
    z = rd.zscore(x)
    if x.std() > 1e-6 * max(1.0, np.abs(x).max()):
        assert abs(z.mean()) < 1e-10 and abs(z.std(ddof=1) - 1) < 1e-10


def test_fits_recover_lines():
    x = np.array([0.1, 0.4, 0.2, 0.9, 0.5])
    a, b = rd.affine_fit(x, 3 * x - 0.2)
    assert abs(a - 3) < 1e-12 and abs(b + 0.2) < 1e-12
    assert abs(rd.origin_fit(x, 2.5 * x) - 2.5) < 1e-12


def _reports(pg, gain, rb):
    out = []
    for i, (p, g, r) in enumerate(zip(pg, gain, rb)):
        rep = rd.ReadinessReport(i, 1.0, 0.0, 1.0, p, p, r)
        out.append(rep.with_gains({10: r + g, 20: r + g}))
    return out


def test_correlation_suite_perfect_predictor():
    r = np.random.default_rng(0)
    pg = r.random(10)
    reps = _reports(pg, 0.3 * pg + 0.01, r.random(10))
    s = rd.correlation_suite(reps, np.random.default_rng(1))
    assert s.rho_pgap_gain == 1.0 and not s.low_sample
    assert abs(s.slope - 0.3) < 1e-10 and abs(s.intercept - 0.01) < 1e-10
    assert s.rho_pgap_gain > s.null_pgap_q95


def test_correlation_suite_low_sample_flag():
    reps = _reports([0.1, 0.2, 0.3], [0.0, 0.1, 0.3], [0.2, 0.4, 0.5])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        s = rd.correlation_suite(reps, np.random.default_rng(0), n_null=20)
    assert s.low_sample and any(issubclass(x.category, rd.LowSampleWarning) for x in w)


def test_shuffle_null_is_centered():
    r = np.random.default_rng(2)
    x = r.random(10)
    null = rd.shuffle_null(x, r.random(10), 200, np.random.default_rng(3))
    assert null.shape == (200,) and abs(null.mean()) < 0.1
    assert np.mean(np.abs(null) < 0.5) > 0.8


def test_constant_rewards_headroom_exactly_zero():
    R = np.array([[1.0] * 7, [0.0] * 7, [0.3] * 7])
    for a in (0.5, 1.0, 3.0, -2.0):
        assert rd.headroom_from_rewards(R, a) == 0.0
    assert rd.bernoulli_headroom(np.array([0.0, 1.0]), 1.0) == 0.0
