import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from costate_lab import analysis as an
from costate_lab import autodiff as ad
from costate_lab import transformer as tf

SMALL = tf.ModelConfig(n_layers=2, d_model=16, n_heads=2, d_head=8, vocab_size=8, max_seq_len=12)
PROBE = tf.ModelConfig(n_layers=2, d_model=4, n_heads=1, d_head=4, vocab_size=8, max_seq_len=12)


def _ckpt(cfg=SMALL, seed=0, scale=0.6):
    r = np.random.default_rng(seed)
    ck = tf.init_checkpoint(cfg, r)
    return ck.with_params(ck.params + scale * r.standard_normal(ck.params.size) * (ck.params != 1.0))


def _trace(ck, seed=0, prefix=(1, 2, 3), n=5):
    return tf.forward(ck, list(prefix), n, rng=np.random.default_rng(seed))


def _adv(trace, seed=0):
    return np.random.default_rng(seed).normal(size=len(trace.action_positions))


@pytest.fixture(scope="module")
def tr():
    return _trace(_ckpt())


def test_probe_invariants():
    with pytest.raises(ValueError):
        an.CostateProbe(tau=0.0)
    with pytest.raises(ValueError):
        an.CostateProbe(layer=3).anchor(SMALL)
    assert an.CostateProbe().anchor(SMALL) == 1


def test_misaligned_advantages(tr):
    with pytest.raises(ValueError):
        an.empirical_costates(tr, np.ones(2))


def test_zero_advantage_zero_costates(tr):
    lam = an.empirical_costates(tr, np.zeros(len(tr.action_positions)))
    assert np.all(lam.values == 0) and lam.provenance == "empirical-autodiff"


@pytest.mark.parametrize("layer", [0, 1, 2])
def test_last_position_immediate_term(tr, layer):
    adv = _adv(tr)
    probe = an.CostateProbe(layer=layer)
    lam = an.empirical_costates(tr, adv, probe).values
    t = tr.action_positions[-1]
    imm = adv[-1] * tr.tape.backward(tr.logprob[-1], wrt=[tr.h(t, layer)])[tr.h(t, layer)].reshape(-1)
    # equal up to rounding from where the scalar A_T enters the sweep
    assert np.max(np.abs(lam[-1] - imm)) <= 1e-14 * np.abs(imm).max()


def test_linearity(tr):
    adv = _adv(tr, 3)
    a = an.empirical_costates(tr, adv).values
    b = an.empirical_costates(tr, 2 * adv).values
    assert np.max(np.abs(b - 2 * a)) < 1e-14 * max(1.0, np.abs(a).max())


@pytest.mark.parametrize("layer", [0, 1, 2])
def test_direct_sum_matches_autodiff(layer):
    for seed in range(3):
        trace = _trace(_ckpt(seed=seed), seed)
        rep = an.costate_decomposition_check(trace, _adv(trace, seed), an.CostateProbe(layer=layer))
        assert rep.direct_residual.max() < 1e-10
        # the last position has no future: the recursion is exact there
        assert rep.recursion_residual[-1] < 1e-12


def test_recursion_exact_at_top_layer(tr):
    # h_t^{(L)} is read by no later position, so both the same-layer map and the future sum vanish
    rep = an.costate_decomposition_check(tr, _adv(tr), an.CostateProbe(layer=SMALL.n_layers))
    assert rep.recursion_residual.max() < 1e-12


def test_decomposition_single_action():
    trace = _trace(_ckpt(), 0, n=1)
    rep = an.costate_decomposition_check(trace, [0.7], an.CostateProbe())
    assert rep.direct_residual.max() < 1e-12 and rep.recursion_residual.max() < 1e-12


def test_jacobian_identity_on_diagonal_at_top_layer(tr):
    J = an.attention_jacobian(tr, 4, 4, an.CostateProbe(layer=SMALL.n_layers))
    assert np.array_equal(J, np.eye(SMALL.d_model))


def test_jacobian_causality(tr):
    J = an.attention_jacobian(tr, 3, 5)
    assert np.all(J == 0)


@pytest.mark.parametrize("layer,k,t", [(1, 6, 4), (0, 7, 2), (0, 5, 5)])
def test_jacobian_matches_finite_differences(tr, layer, k, t):
    J = an.attention_jacobian(tr, k, t, an.CostateProbe(layer=layer))

    def f(v):
        return an.replay(tr, perturb={(t, layer): v.reshape(1, -1)}).h(k, -1).data[0]

    Jfd = ad.numerical_jacobian(f, np.zeros(SMALL.d_model), 1e-5)
    assert np.max(np.abs(J - Jfd)) < 1e-5


def test_replay_reproduces_trace(tr):
    g = an.replay(tr)
    for t in range(tr.T):
        assert np.array_equal(g.h(t, -1).data, tr.h(t, -1).data)


# ------------------------------------------------------------- sampling gap


def test_soft_path_factors_reconstruct_difference(tr):
    for t in (3, 5):
        Df, J, (A, B, C) = an.relaxed_transition_jacobian(tr, t, with_factors=True)
        assert np.max(np.abs((Df - J) - A @ B @ C)) < 1e-12


def test_relaxed_jacobian_fd():
    ck = _ckpt(seed=5)
    trace = _trace(ck, 5)
    probe = an.CostateProbe(tau=25.0)
    t, l = 4, probe.anchor(SMALL)
    Df, _ = an.relaxed_transition_jacobian(trace, t, probe)
    toks = trace.tokens[: t + 2]

    def f(v):
        g = an.replay(trace, tokens=toks, relax_from=t, tau=probe.tau, perturb={(t, l): v.reshape(1, -1)})
        return g.h(t + 1, -1).data[0]

    Dfd = ad.numerical_jacobian(f, np.zeros(SMALL.d_model), 1e-5)
    assert np.max(np.abs(Df - Dfd)) < 1e-5


def test_peaked_logits_close_gap():
    ck = _ckpt(seed=1)
    ck = ck.with_array("head_b", ck.arrays()["head_b"] + 30.0 * (np.arange(SMALL.vocab_size) == 3))
    trace = _trace(ck, 1)
    for t in (3, 5):
        Df, J = an.relaxed_transition_jacobian(trace, t)
        assert an.ad.operator_norm(Df - J) < 1e-6


def test_zero_embedding_no_soft_path():
    ck = _ckpt(seed=2)
    ck = ck.with_array("wte", 0.0)
    trace = _trace(ck, 2)
    Df, J = an.relaxed_transition_jacobian(trace, 4)
    assert np.array_equal(Df, J)


def test_straight_through_mode_runs(tr):
    Df, J = an.relaxed_transition_jacobian(tr, 4, an.CostateProbe(relax_mode="st"))
    Ds, Js = an.relaxed_transition_jacobian(tr, 4)
    assert np.isfinite(Df).all() and not np.allclose(J, Js)


def test_uniform_intermediate_and_covariance():
    cfg = tf.ModelConfig(n_layers=1, d_model=4, n_heads=1, d_head=4, vocab_size=4, max_seq_len=6)
    ck = _ckpt(cfg, 3)
    ck = ck.with_array("head", 0.0).with_array("head_b", 0.0)
    trace = _trace(ck, 3, prefix=(0, 1), n=2)
    rec = an.sampling_gap_bound(trace, 2, an.CostateProbe(layer=0), C=1.0)
    assert abs(rec.intermediate - 0.75) < 1e-15
    assert abs(rec.cov_norm - 0.25) < 1e-15
    assert abs(rec.entropy - math.log(4)) < 1e-15 and abs(rec.bound - 1.0) < 1e-15


def test_deterministic_position_zero_bound():
    ck = _ckpt(seed=4)
    ck = ck.with_array("head_b", ck.arrays()["head_b"] + 60.0 * (np.arange(SMALL.vocab_size) == 0))
    trace = _trace(ck, 4)
    rec = an.sampling_gap_bound(trace, 4, C=2.0)
    assert rec.entropy < 1e-20 and rec.bound < 1e-9 and rec.gap < 1e-9


def test_fitted_C_zero_violations():
    recs = []
    for s in range(4):
        trace = _trace(_ckpt(seed=s), s)
        recs += [an.sampling_gap_bound(trace, t, C=1.0) for t in trace.action_positions[:-1]]
    C = an.fit_C(recs, SMALL.vocab_size)
    assert C > 0
    bounds = [C * math.sqrt(r.entropy / math.log(SMALL.vocab_size)) for r in recs]
    assert all(r.gap <= b * (1 + 1e-12) for r, b in zip(recs, bounds))
    assert all(r.gap >= 0 and 0 <= r.entropy <= math.log(SMALL.vocab_size) + 1e-12 for r in recs)


def test_sharpen_scales_logits(tr):
    ck = _ckpt()
    sharp = an.sharpen(ck, 3.0)
    a = tf.forward_batch(tf.bind(ck), SMALL, tr.tokens[None]).logits.data
    b = tf.forward_batch(tf.bind(sharp), SMALL, tr.tokens[None]).logits.data
    assert np.max(np.abs(b - 3 * a)) < 1e-12


# ------------------------------------------------------------ accumulation audit


def test_accumulation_last_position_empty_sum(tr):
    rec = an.accumulation_bound(tr, _adv(tr), C=1.0)
    assert rec.bound_product[-1] == 0 and rec.bound_uniform[-1] == 0
    assert rec.measured[-1] < 1e-8


def test_accumulation_needs_constant(tr):
    with pytest.raises(ValueError):
        an.accumulation_bound(tr, _adv(tr))


def test_accumulation_deterministic_trajectory():
    ck = _ckpt(seed=6)
    ck = ck.with_array("head_b", ck.arrays()["head_b"] + 60.0 * (np.arange(SMALL.vocab_size) == 2))
    trace = _trace(ck, 6)
    rec = an.accumulation_bound(trace, _adv(trace), C=5.0)
    assert rec.deterministic.all()
    assert rec.bound_product.max() < 1e-6 and rec.measured.max() < 1e-6


def test_accumulation_product_below_uniform(tr):
    rec = an.accumulation_bound(tr, _adv(tr), C=1.0)
    assert np.all(rec.bound_product <= rec.bound_uniform * (1 + 1e-12))


def test_accumulation_measured_gaps_input(tr):
    gaps = {t: 0.0 for t in range(tr.T)}
    rec = an.accumulation_bound(tr, _adv(tr), gaps=gaps)
    assert np.all(rec.bound_product == 0)


# --------------------------------------------------------------------- rank


def test_rank_probe_config():
    ck = _ckpt(PROBE, 7, scale=1.0)
    trace = _trace(ck, 7, n=6)
    arr, _ = an.rank_survey(trace)
    bound = PROBE.n_layers * PROBE.d_head * PROBE.n_heads
    assert arr[:, 2].max() <= bound


def test_rank_report_default_config():
    cfg = tf.ModelConfig()
    ck = _ckpt(cfg, 8, scale=0.3)
    trace = _trace(ck, 8, n=3)
    rep = an.attention_rank_check(an.attention_jacobian(trace, 5, 2), cfg)
    assert rep.bound == 64 and rep.dim_bound == 32 and rep.passed


def test_masked_position_zero_jacobian(tr):
    g = an.replay(tr, blocked=(3,))
    J = an.jacobians_to(g, [g.h(6, -1)], g.h(3, 1))[0]
    assert np.linalg.norm(J, 2) < 1e-9
    assert an.attention_mass(g, 6, 3) == 0.0


def test_numerical_rank():
    assert an.numerical_rank(np.zeros((3, 3))) == 0
    assert an.numerical_rank(np.diag([1.0, 1e-3, 1e-12])) == 2


# ----------------------------------------------------------- usable signal


def test_signal_equality_when_equal():
    G = np.random.default_rng(0).normal(size=(20, 5))
    rep = an.usable_signal_bound_check(G, G)
    assert rep.lam == 0 and abs(rep.inner - rep.sigma) < 1e-12 and rep.passed


def test_signal_equality_when_zero():
    G = np.random.default_rng(1).normal(size=(20, 5))
    rep = an.usable_signal_bound_check(np.zeros_like(G), G)
    assert rep.inner == 0 and abs(rep.sigma - rep.lam) < 1e-12 and rep.passed


def test_signal_bound_random_perturbations():
    r = np.random.default_rng(2)
    G = r.normal(size=(10_000, 6))
    lam = G + r.normal(size=G.shape) * r.uniform(0, 3, size=(10_000, 1))
    rep = an.usable_signal_bound_check(lam, G)
    assert rep.passed and rep.per_sample_slack_min >= -1e-10


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 10.0))
def test_signal_bound_property(seed, scale):
    r = np.random.default_rng(seed)
    G = r.normal(size=(7, 3)) * r.uniform(0, 5)
    lam = r.normal(size=G.shape) * scale
    assert an.usable_signal_bound_check(lam, G).passed
