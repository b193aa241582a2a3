"""GRPO: group-normalised outcome advantages, clipped surrogate, SGD with momentum."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .rng import gumbel


@dataclass(frozen=True)
class GrpoConfig:
    eps: float = 0.2
    beta: float = 0.0
    group_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 10
    prompts_per_step: int = 8
    xi_num: float = 1e-8
    temperature: float = 1.0

    def __post_init__(self):
        if not self.eps > 0 or self.beta < 0 or self.steps < 1 or self.group_size < 2:
            raise ValueError("need eps > 0, beta >= 0, steps >= 1, group_size >= 2")


@dataclass
class Group:
    prompt: np.ndarray  # (P,)
    completions: np.ndarray  # (G, Tc)
    rewards: np.ndarray  # (G,)
    old_logprobs: np.ndarray  # (G, Tc)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.rewards.size < 2:
            raise ValueError("a group needs at least two completions")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def tokens(self):
        G = self.completions.shape[0]
        return np.concatenate([np.broadcast_to(self.prompt, (G, self.prompt.size)), self.completions], axis=1)


@dataclass
class AdvantageSet:
    normalized: np.ndarray  # (G,)
    per_token: np.ndarray  # (G, Tc)
    xi_num: float


def group_normalize(rewards, xi_num=1e-8, length=1):
    """(r - mean) / (population std + xi_num), repeated along the completion."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group normalisation needs at least two rewards")
    rt = (r - r.mean()) / (r.std() + xi_num)
    return AdvantageSet(rt, np.repeat(rt[:, None], length, axis=1), xi_num)


def _completion_logprobs(P, cfg, group, temperature):
    """Current log-probs of the completion tokens (G, Tc) and the logits that produced them."""
    tokens = group.tokens
    lp, out = tf.sequence_logprobs(P, cfg, tokens, temperature)
    p0 = group.prompt.size - 1
    Tc = group.completions.shape[1]
    return lp[:, p0 : p0 + Tc], out.logits[:, p0 : p0 + Tc]


def _kl_to_ref(logits, ref_logits, temperature):
    """Exact KL(pi_theta || pi_ref) per visited state."""
    lp = ad.log_softmax(logits * (1.0 / temperature))
    lq = ad.log_softmax(ad.Tensor(ref_logits / temperature))
    return (ad.exp(lp) * (lp - lq)).sum(axis=-1)


@dataclass
class SurrogateOut:
    loss: ad.Tensor
    clip_fraction: float
    kl: float
    ratios: np.ndarray


def surrogate_loss(P, cfg, groups, advantages, config, ref_P=None):
    """Negated clipped objective averaged over groups and tokens, plus beta * mean exact KL."""
    terms, kls, ratios = [], [], []
    for g, adv in zip(groups, advantages):
        lp, logits = _completion_logprobs(P, cfg, g, config.temperature)
        rho = ad.exp(lp - g.old_logprobs)
        A = adv.per_token
        s = ad.minimum(rho * A, ad.clip(rho, 1 - config.eps, 1 + config.eps) * A)
        terms.append(s.reshape(-1))
        ratios.append(rho.data.reshape(-1))
        if config.beta > 0:
            ref = ref_P if ref_P is not None else {k: ad.Tensor(v.data) for k, v in P.items()}
            ref_logits = _completion_logprobs(ref, cfg, g, config.temperature)[1].data
            kls.append(_kl_to_ref(logits, ref_logits, config.temperature).reshape(-1))
    surr = ad.concat(terms, 0).mean()
    loss = -surr
    kl_val = 0.0
    if kls:
        kl = ad.concat(kls, 0).mean()
        loss = loss + config.beta * kl
        kl_val = float(kl.data)
    rho = np.concatenate(ratios)
    clip_frac = float(np.mean(np.abs(rho - 1.0) > config.eps))
    return SurrogateOut(loss, clip_frac, kl_val, rho)


def surrogate_grad(ckpt, groups, advantages, config, ref=None):
    with ad.Tape() as tp:
        P = tf.bind(ckpt, tp)
        ref_P = tf.bind(ref) if ref is not None else None
        out = surrogate_loss(P, ckpt.config, groups, advantages, config, ref_P)
        g = tf.flat_grad(tp.backward(out.loss), P, ckpt.config)
    return g, out


@dataclass
class OptState:
    velocity: np.ndarray = None


@dataclass
class StepStats:
    mean_reward: float
    mean_abs_adv: float
    clip_fraction: float
    grad_norm: float
    kl: float
    loss: float


def actor_step(ckpt, groups, config, state=None, ref=None, advantages=None):
    """One SGD-with-momentum update on the surrogate; returns (checkpoint, state, stats)."""
    if advantages is None:
        advantages = [group_normalize(g.rewards, config.xi_num, g.completions.shape[1]) for g in groups]
    g, out = surrogate_grad(ckpt, groups, advantages, config, ref)
    if not np.all(np.isfinite(g)):
        raise ad.NonFiniteError(f"non-finite surrogate gradient (loss {out.loss.data})")
    state = OptState(np.zeros_like(g)) if state is None or state.velocity is None else state
    v = config.momentum * state.velocity + g
    new = ckpt.with_params(ckpt.params - config.lr * v)
    stats = StepStats(
        float(np.mean([gr.rewards.mean() for gr in groups])),
        float(np.mean([np.abs(a.normalized).mean() for a in advantages])),
        out.clip_fraction,
        float(np.linalg.norm(g)),
        out.kl,
        float(out.loss.data),
    )
    return new, OptState(v), stats


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    clip_fraction: float
    surrogate_grad: np.ndarray
    sf_grad: np.ndarray
    passed: bool


def sf_gradient(ckpt, groups, advantages, config):
    """Gradient of -mean(A * log pi) over all completion tokens: the weighted score function."""
    with ad.Tape() as tp:
        P = tf.bind(ckpt, tp)
        terms = []
        for g, adv in zip(groups, advantages):
            lp, _ = _completion_logprobs(P, ckpt.config, g, config.temperature)
            terms.append((lp * adv.per_token).reshape(-1))
        obj = -ad.concat(terms, 0).mean()
        return tf.flat_grad(tp.backward(obj), P, ckpt.config)


def local_sf_equivalence(ckpt, groups, config, advantages=None, tol=1e-10):
    """Compare the clipped-surrogate gradient with the score-function gradient at ``ckpt``.

    Meaningful at theta = theta_old (the old log-probs stored in ``groups`` came
    from ``ckpt``); the KL weight is forced to zero.
    """
    config = replace(config, beta=0.0)
    if advantages is None:
        advantages = [group_normalize(g.rewards, config.xi_num, g.completions.shape[1]) for g in groups]
    gs, out = surrogate_grad(ckpt, groups, advantages, config)
    gf = sf_gradient(ckpt, groups, advantages, config)
    diff = float(np.max(np.abs(gs - gf)))
    return EquivalenceReport(diff, out.clip_fraction, gs, gf, diff < tol)


# -------------------------------------------------------------- sampling


def completion_logprobs(ckpt, tokens, n_prompt, temperature=1.0):
    lp, _ = tf.sequence_logprobs(tf.bind(ckpt), ckpt.config, tokens, temperature)
    return lp.data[:, n_prompt - 1 :]


def sample_completions(ckpt, prompts, G, length, rng, temperature=1.0):
    """G completions per prompt by Gumbel-max sampling; returns (n, G, length) tokens."""
    prompts = np.asarray(prompts)
    n, Pn = prompts.shape
    seq = np.repeat(prompts, G, axis=0)
    P = tf.bind(ckpt)
    for _ in range(length):
        z = tf.forward_batch(P, ckpt.config, seq).logits.data[:, -1] / temperature
        tok = np.argmax(z + gumbel(rng, z.shape), axis=1)
        seq = np.concatenate([seq, tok[:, None]], axis=1)
    return seq[:, Pn:].reshape(n, G, length)


def make_groups(ckpt, prompts, reward_fn, config, rng, length=1):
    comps = sample_completions(ckpt, prompts, config.group_size, length, rng, config.temperature)
    groups = []
    for i, q in enumerate(np.asarray(prompts)):
        c = comps[i]
        toks = np.concatenate([np.broadcast_to(q, (c.shape[0], q.size)), c], axis=1)
        old = completion_logprobs(ckpt, toks, q.size, config.temperature)
        r = np.array([reward_fn(i, q, ci) for ci in c], dtype=np.float64)
        groups.append(Group(q.copy(), c, r, old))
    return groups


@dataclass
class RunResult:
    checkpoint: tf.Checkpoint
    stats: list = field(default_factory=list)


def run(ckpt, prompt_fn, reward_fn, config, rng, length=1, ref=None, callback=None):
    """K = config.steps GRPO updates.  ``prompt_fn(k)`` returns the prompts for step k."""
    ref = ckpt if ref is None else ref
    state = OptState()
    res = RunResult(ckpt)
    cur = ckpt
    for k in range(config.steps):
        prompts = prompt_fn(k)
        groups = make_groups(cur, prompts, reward_fn, config, rng, length)
        cur, state, st = actor_step(cur, groups, config, state, ref if config.beta > 0 else None)
        res.stats.append(st)
        if callback is not None:
            callback(k, cur, st)
    res.checkpoint = cur
    return res
