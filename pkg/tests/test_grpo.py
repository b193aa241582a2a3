import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from costate_lab import autodiff as ad
from costate_lab import grpo
from costate_lab import transformer as tf

SMALL = tf.ModelConfig(n_layers=2, d_model=16, n_heads=2, d_head=8, vocab_size=8, max_seq_len=10)


def _ckpt(seed=0, scale=0.5):
    r = np.random.default_rng(seed)
    ck = tf.init_checkpoint(SMALL, r)
    return ck.with_params(ck.params + scale * r.standard_normal(ck.params.size) * (ck.params != 1.0))


def _groups(ck, seed, n=2, G=4, length=2, cfg=None):
    cfg = cfg or grpo.GrpoConfig(group_size=G)
    r = np.random.default_rng(seed)
    prompts = r.integers(0, SMALL.vocab_size, (n, 4))
    rr = np.random.default_rng(seed + 1)
    return grpo.make_groups(ck, prompts, lambda i, q, c: rr.random(), cfg, r, length)


def test_normalize_all_equal():
    a = grpo.group_normalize([1, 1, 1, 1], 1e-8)
    assert np.all(a.normalized == 0)


def test_normalize_two_point():
    a = grpo.group_normalize([1, 0], 1e-8)
    assert np.max(np.abs(a.normalized - [1, -1])) < 1e-6


def test_normalize_affine_invariance():
    a = grpo.group_normalize([2, 0, 2, 0]).normalized
    b = grpo.group_normalize([1, 0, 1, 0]).normalized
    assert np.max(np.abs(a - b)) < 1e-7 and np.max(np.abs(np.abs(a) - 1)) < 1e-7


def test_normalize_needs_two():
    with pytest.raises(ValueError):
        grpo.group_normalize([1.0])


def test_per_token_constant():
    a = grpo.group_normalize([0.3, 0.9, 0.1], length=5)
    assert np.all(a.per_token == a.normalized[:, None])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=2, max_size=16))
@example([43.5, 43.5078125, 43.50647940928722])
@example([43.5, 43.515625])
def test_normalize_moments(r):
    r = np.array(r)
    xi = 1e-8
    a = grpo.group_normalize(r, xi).normalized
    sd = r.std()
    # centring error is a few ulps of max|r|, amplified by 1 / (sd + xi)
    eps = np.finfo(float).eps
    tol = 4 * r.size * eps * (np.abs(r).max() + 1.0) / (sd + xi)
    assert abs(a.mean()) < tol
    assert abs(a.std() - sd / (sd + xi)) < tol + 1e-12


def test_surrogate_at_old_equals_minus_mean_adv():
    ck = _ckpt(1)
    groups = _groups(ck, 0)
    cfg = grpo.GrpoConfig(beta=0.0)
    adv = [grpo.group_normalize(g.rewards, length=g.completions.shape[1]) for g in groups]
    out = grpo.surrogate_loss(tf.bind(ck), SMALL, groups, adv, cfg)
    expected = -np.mean(np.concatenate([a.per_token.reshape(-1) for a in adv]))
    assert abs(float(out.loss.data) - expected) < 1e-15
    assert out.clip_fraction == 0.0 and np.all(out.ratios == 1.0)


def test_zero_advantage_zero_loss_and_grad():
    ck = _ckpt(2)
    groups = _groups(ck, 1)
    adv = [grpo.AdvantageSet(np.zeros(4), np.zeros((4, 2)), 1e-8) for _ in groups]
    g, out = grpo.surrogate_grad(ck, groups, adv, grpo.GrpoConfig())
    assert float(out.loss.data) == 0.0 and np.all(g == 0.0)


def test_kl_zero_against_self_and_nonnegative():
    ck = _ckpt(3)
    groups = _groups(ck, 2)
    cfg = grpo.GrpoConfig(beta=0.5)
    adv = [grpo.group_normalize(g.rewards, length=2) for g in groups]
    out = grpo.surrogate_loss(tf.bind(ck), SMALL, groups, adv, cfg, tf.bind(ck))
    assert abs(out.kl) < 1e-15
    other = _ckpt(4)
    for g in groups:
        lg = grpo._completion_logprobs(tf.bind(ck), SMALL, g, 1.0)[1]
        lr = grpo._completion_logprobs(tf.bind(other), SMALL, g, 1.0)[1].data
        assert np.all(grpo._kl_to_ref(lg, lr, 1.0).data >= 0)


def test_actor_step_zero_advantage_no_change():
    ck = _ckpt(5)
    groups = _groups(ck, 3)
    for g in groups:
        g.rewards[:] = 0.7
    new, _, stats = grpo.actor_step(ck, groups, grpo.GrpoConfig(beta=0.0))
    assert np.array_equal(new.params, ck.params)
    assert stats.mean_abs_adv == 0.0


def test_actor_step_raises_logprob_of_favoured_completion():
    ck = _ckpt(6)
    groups = _groups(ck, 4, n=1)
    g = groups[0]
    g.rewards[:] = 0.0
    g.rewards[2] = 1.0
    before = g.old_logprobs[2].sum()
    new, _, _ = grpo.actor_step(ck, groups, grpo.GrpoConfig(lr=0.01))
    after = grpo.completion_logprobs(new, g.tokens[2:3], g.prompt.size)[0].sum()
    assert after > before


def test_actor_step_nonfinite_aborts():
    ck = _ckpt(7)
    groups = _groups(ck, 5)
    adv = [grpo.AdvantageSet(np.full(4, 1e308), np.full((4, 2), 1e308), 1e-8) for _ in groups]
    with pytest.raises(ad.NonFiniteError):
        grpo.actor_step(ck, groups, grpo.GrpoConfig(), advantages=adv)


def test_run_reproducible():
    ck = _ckpt(8)
    cfg = grpo.GrpoConfig(steps=3, group_size=4, prompts_per_step=2, lr=0.02)
    prompts = np.random.default_rng(0).integers(0, 8, (2, 4))

    def go():
        res = grpo.run(ck, lambda k: prompts, lambda i, q, c: float(c[0] == q[0]), cfg, np.random.default_rng(11))
        return [s.mean_reward for s in res.stats], res.checkpoint.params

    a, pa = go()
    b, pb = go()
    assert a == b and np.array_equal(pa, pb)


def test_local_equivalence_twenty_groups():
    ck = _ckpt(9)
    for seed in range(20):
        groups = _groups(ck, 100 + seed, n=1, G=4, length=2)
        rep = grpo.local_sf_equivalence(ck, groups, grpo.GrpoConfig(beta=0.3))
        assert rep.passed and rep.max_abs_diff < 1e-10
        assert rep.clip_fraction == 0.0
        assert np.linalg.norm(rep.sf_grad) > 0


def test_local_equivalence_scales_with_advantage():
    ck = _ckpt(10)
    groups = _groups(ck, 7)
    adv = [grpo.group_normalize(g.rewards, length=2) for g in groups]
    adv3 = [grpo.AdvantageSet(3 * a.normalized, 3 * a.per_token, a.xi_num) for a in adv]
    r1 = grpo.local_sf_equivalence(ck, groups, grpo.GrpoConfig(), adv)
    r3 = grpo.local_sf_equivalence(ck, groups, grpo.GrpoConfig(), adv3)
    mask = np.abs(r1.surrogate_grad) > 1e-12
    rel = np.abs(r3.surrogate_grad[mask] - 3 * r1.surrogate_grad[mask]) / np.abs(3 * r1.surrogate_grad[mask])
    assert rel.max() < 1e-10


def test_local_equivalence_fails_away_from_old():
    ck = _ckpt(11)
    groups = _groups(ck, 8, n=2, G=6)
    moved = ck.with_params(ck.params + 0.5 * np.random.default_rng(0).standard_normal(ck.params.size))
    rep = grpo.local_sf_equivalence(moved, groups, grpo.GrpoConfig(eps=0.2))
    assert not rep.passed and rep.clip_fraction > 0
