"""RL-readiness decomposition: signal Sigma, mismatch Lambda_m, headroom H_alpha, impact score.

All per-checkpoint quantities are computed on matched samples: the true
costate G_t and the RL costate lambda_hat_t share prompt, hidden states,
sampled answer and reward.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from ._accel import K
from .analysis import CostateProbe, empirical_costates
from .rng import gumbel


class LowSampleWarning(UserWarning):
    pass


# ------------------------------------------------------------- costates


def label_probability(trace, label, pos=None):
    """p_theta(label | prefix) read at position ``pos`` (default: last), as a tape node."""
    pos = trace.T - 1 if pos is None else pos
    with trace.tape:
        return ad.exp(ad.log_softmax(trace.logits[pos] * (1.0 / trace.temperature))[0, int(label)])


def true_costate_G(trace, reward, probe=CostateProbe(), positions=None):
    """G_t = dR/dh_t^{(l*)} for a scalar reward node on the trace tape; (n_pos, d)."""
    if not isinstance(reward, ad.Tensor) or reward.node is None:
        raise ad.TapeError("reward is not recorded on the trace tape")
    l = probe.anchor(trace.config)
    pos = range(trace.T) if positions is None else positions
    nodes = [trace.h(t, l) for t in pos]
    g = trace.tape.backward(reward, wrt=nodes)
    return np.stack([g[n].reshape(-1) for n in nodes])


def rl_costate(trace, advantages, probe=CostateProbe(), positions=None):
    """lambda_hat_t of the detached-advantage log-prob loss; (n_pos, d)."""
    return empirical_costates(trace, advantages, probe, positions).values


# ------------------------------------------------------------- matched inputs


@dataclass
class ScoreConfig:
    alpha: float = 1.0
    group: int = 8
    layer: int = None
    advantage: str = "centered"  # "centered" (r - mean) or "grpo" ((r - mean) / (std + xi))
    estimator: str = "group"  # E[lambda_hat | h] plug-in: "group" mean or "single" sample
    xi_num: float = 1e-8
    headroom: str = "exact"  # "exact" Bernoulli form from p(y*|q), or "mc"
    n_rollouts: int = 64

    def __post_init__(self):
        if self.alpha == 0:
            raise ValueError("alpha must be nonzero")
        if self.group < 2:
            raise ValueError("group must be >= 2")
        if self.advantage not in ("centered", "grpo"):
            raise ValueError(f"unknown advantage {self.advantage!r}")
        if self.estimator not in ("single", "group"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.headroom not in ("exact", "mc"):
            raise ValueError(f"unknown headroom mode {self.headroom!r}")


def advantages_for(rewards, mode="centered", xi_num=1e-8):
    r = np.asarray(rewards, dtype=np.float64)
    a = r - r.mean(axis=-1, keepdims=True)
    if mode == "grpo":
        a = a / (r.std(axis=-1, keepdims=True) + xi_num)
    return a


@dataclass
class ReadinessInputs:
    prompts: np.ndarray  # (n, P)
    labels: np.ndarray  # (n,)
    p_label: np.ndarray  # (n,) exact p(y*|q)
    completions: np.ndarray  # (n, G)
    rewards: np.ndarray  # (n, G)
    advantages: np.ndarray  # (n, G)
    G: np.ndarray  # (n, P, d)
    dlogp: np.ndarray  # (n, G, P, d): d log pi(answer) / d h_t
    alpha: float
    layer: int
    advantage: str = "centered"
    xi_num: float = 1e-8

    def __post_init__(self):
        n, Gs, P, d = self.dlogp.shape
        if self.G.shape != (n, P, d) or self.rewards.shape != (n, Gs) or self.advantages.shape != (n, Gs):
            raise ValueError("G and lambda_hat must be matched per prompt, completion and position")

    @property
    def lam(self):
        """lambda_hat_t = A * d log pi / d h_t per completion; (n, G, P, d)."""
        return self.advantages[:, :, None, None] * self.dlogp

    def with_advantage(self, mode):
        adv = advantages_for(self.rewards, mode, self.xi_num)
        return replace(self, advantages=adv, advantage=mode)


def collect_inputs(ckpt, prompts, labels, config=ScoreConfig(), rng=None):
    """Sample a group of one-token answers per prompt and compute matched (G_t, lambda_hat_t).

    Reward is 1[answer == label]; G is the gradient of p(label | prompt).  Every
    prompt position is answer-relevant (the answer logit reads all of them).
    """
    cfg = ckpt.config
    probe = CostateProbe(layer=config.layer)
    l = probe.anchor(cfg)
    prompts = np.asarray(prompts, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    n, P = prompts.shape
    Gs, d = config.group, cfg.d_model
    G = np.zeros((n, P, d))
    dlogp = np.zeros((n, Gs, P, d))
    comps = np.zeros((n, Gs), dtype=np.int64)
    rewards = np.zeros((n, Gs))
    adv = np.zeros((n, Gs))
    p_lab = np.zeros(n)
    for i in range(n):
        tape = ad.Tape()
        with tape:
            Pm = tf.bind(ckpt, tape)
            tr = tf.run_trace(Pm, cfg, prompts[i], P, tape)
            logp = ad.log_softmax(tr.logits[P - 1])
        z = tr.logits[P - 1].data[0]
        o = np.argmax(z[None, :] + gumbel(rng, (Gs, z.size)), axis=1)
        comps[i] = o
        rewards[i] = (o == labels[i]).astype(np.float64)
        adv[i] = advantages_for(rewards[i], config.advantage, config.xi_num)
        with tape:
            R = ad.exp(logp[0, int(labels[i])])
        p_lab[i] = float(R.data)
        nodes = [tr.h(t, l) for t in range(P)]
        g = tape.backward(R, wrt=nodes)
        G[i] = np.stack([g[nd].reshape(-1) for nd in nodes])
        # one sweep per distinct answer, shared by the completions that drew it
        for v in np.unique(o):
            with tape:
                lv = logp[0, int(v)]
            gv = tape.backward(lv, wrt=nodes)
            dlogp[i, o == v] = np.stack([gv[nd].reshape(-1) for nd in nodes])
    return ReadinessInputs(prompts, labels, p_lab, comps, rewards, adv, G, dlogp, config.alpha, l,
                           config.advantage, config.xi_num)


# ------------------------------------------------------------- signal terms


@dataclass
class SignalTerms:
    sigma: float
    lambda_m: float
    s_m: float
    inner: float  # E<lambda_est, G>
    estimator: str


def lambda_estimate(inputs, estimator="single"):
    """Per-sample plug-in for E[lambda_hat | h]: (n, G, P, d) aligned with G broadcast."""
    if estimator == "single":
        return inputs.lam
    if estimator == "group":
        m = inputs.lam.mean(axis=1, keepdims=True)
        return np.broadcast_to(m, inputs.lam.shape)
    raise ValueError(f"unknown estimator {estimator!r}")


def sigma_lambda(inputs, estimator="single"):
    """Sigma = E||G||^2 and Lambda_m = E||G|| ||lambda_est - G|| over (prompt, completion, position)."""
    if inputs.dlogp.size == 0:
        raise ValueError("empty sample")
    est = lambda_estimate(inputs, estimator)
    G = np.broadcast_to(inputs.G[:, None], est.shape)
    gn = np.linalg.norm(G, axis=-1)
    sigma = float(np.mean(gn**2))
    lam_m = float(np.mean(gn * np.linalg.norm(est - G, axis=-1)))
    inner = float(np.mean(np.einsum("...d,...d->...", est, G)))
    return SignalTerms(sigma, lam_m, sigma - lam_m, inner, estimator)


def sigma_lambda_pairs(G, lam):
    """Sigma and Lambda_m for explicit matched rows (n, d)."""
    G = np.asarray(G, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if G.size == 0:
        raise ValueError("empty sample")
    gn = np.linalg.norm(G, axis=-1)
    return float(np.mean(gn**2)), float(np.mean(gn * np.linalg.norm(lam - G, axis=-1)))


# ------------------------------------------------------------- headroom


def log_mean_exp(x, axis=-1):
    # max-shifted so that a constant row returns its value exactly
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.mean(np.exp(x - m), axis=axis))


def headroom_from_rewards(R, alpha=1.0):
    """Mean over prompts of (1/alpha) log mean exp(alpha R) - mean R; R is (n_prompts, n_rollouts)."""
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    h = log_mean_exp(alpha * R, axis=1) / alpha - R.mean(axis=1)
    # Jensen: the true value is >= 0 for alpha > 0; clip rounding below zero
    if alpha > 0:
        h = np.maximum(h, 0.0)
    return float(h.mean())


def bernoulli_headroom(p, alpha=1.0):
    """Exact headroom of R ~ Bernoulli(p), averaged over prompts."""
    if alpha == 0:
        raise ValueError("alpha must be nonzero")
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    # log(1 - p + p e^alpha) without overflow; log(0) = -inf is absorbed by logaddexp
    with np.errstate(divide="ignore"):
        lme = np.logaddexp(np.log1p(-p), np.log(p) + alpha)
    h = lme / alpha - p
    if alpha > 0:
        h = np.maximum(h, 0.0)
    return float(np.mean(h))


def headroom(ckpt, prompts, alpha, n_rollouts, rng, reward_fn, temperature=1.0):
    """Monte-Carlo H_alpha from ``n_rollouts`` sampled one-token answers per prompt.

    ``reward_fn(i, prompt, answer)`` returns R in [0, 1].
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    z = tf.forward_batch(tf.bind(ckpt), ckpt.config, prompts).logits.data[:, -1] / temperature
    R = np.zeros((len(prompts), n_rollouts))
    for i, q in enumerate(prompts):
        o = np.argmax(z[i][None, :] + gumbel(rng, (n_rollouts, z.shape[1])), axis=1)
        R[i] = [reward_fn(i, q, int(a)) for a in o]
    return headroom_from_rewards(R, alpha)


# ------------------------------------------------------------- impact


def impact_score(sigma, lambda_m, h_alpha):
    vals = (sigma, lambda_m, h_alpha)
    if not all(np.isfinite(v) for v in vals):
        raise ValueError("impact score inputs must be finite")
    return (sigma - lambda_m) * h_alpha


@dataclass
class ReadinessReport:
    step: int
    sigma: float
    lambda_m: float
    s_m: float
    h_alpha: float
    p_gap: float
    r_before: float
    r_after: dict = field(default_factory=dict)  # budget K -> mean R_after
    mean_gain: float = float("nan")
    extras: dict = field(default_factory=dict)

    def with_gains(self, r_after):
        gains = [v - self.r_before for v in r_after.values()]
        return ReadinessReport(self.step, self.sigma, self.lambda_m, self.s_m, self.h_alpha, self.p_gap,
                               self.r_before, dict(r_after), float(np.mean(gains)), dict(self.extras))


def score_checkpoint(ckpt, prompts, labels, config=ScoreConfig(), rng=None):
    """Per-checkpoint readiness report (no RL gains yet)."""
    inp = collect_inputs(ckpt, prompts, labels, config, rng)
    terms = sigma_lambda(inp, config.estimator)
    if config.headroom == "exact":
        h = bernoulli_headroom(inp.p_label, config.alpha)
    else:
        h = headroom(ckpt, prompts, config.alpha, config.n_rollouts, rng,
                     lambda i, q, a: float(a == labels[i]))
    extras = {}
    for mode in ("centered", "grpo"):
        alt = inp.with_advantage(mode)
        for est in ("single", "group"):
            t = sigma_lambda(alt, est)
            extras[f"lambda_m_{mode}_{est}"] = t.lambda_m
            extras[f"inner_{mode}_{est}"] = t.inner
    return ReadinessReport(int(ckpt.pretrain_step), terms.sigma, terms.lambda_m, terms.s_m, h,
                           impact_score(terms.sigma, terms.lambda_m, h), float(inp.p_label.mean()),
                           extras=extras)


def best_switch_point(reports):
    """The report maximising S_m * H_alpha; ties go to the earlier checkpoint (smaller step)."""
    if not reports:
        raise ValueError("no checkpoints")
    order = sorted(range(len(reports)), key=lambda i: reports[i].step)
    best = order[0]
    for i in order[1:]:
        if reports[i].s_m * reports[i].h_alpha > reports[best].s_m * reports[best].h_alpha:
            best = i
    return reports[best]


def argmax_earliest(scores):
    """0-based index of the first maximum."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scores")
    return int(np.argmax(s))


# ------------------------------------------------------------- statistics


def average_ranks(x):
    return K.rank_average(np.ascontiguousarray(x, dtype=np.float64))


def spearman(x, y):
    """Spearman correlation with average ranks for ties; NaN if either input is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-d arrays of equal length")
    rx, ry = average_ranks(x), average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    return float(rx @ ry / den) if den > 0 else float("nan")


def zscore(x):
    """(x - mean) / sample std (ddof=1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("z-scores need at least two values")
    s = x.std(ddof=1)
    return (x - x.mean()) / s if s > 0 else np.zeros_like(x)


def affine_fit(x, y):
    """Least-squares y ~ a x + b; returns (slope, intercept)."""
    x = np.asarray(x, dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.asarray(y, dtype=np.float64), rcond=None)
    return float(coef[0]), float(coef[1])


def origin_fit(x, y):
    """Least-squares kappa for y ~ kappa x."""
    x = np.asarray(x, dtype=np.float64)
    xx = float(x @ x)
    return float(x @ np.asarray(y, dtype=np.float64) / xx) if xx > 0 else float("nan")


def shuffle_null(x, y, n_draws=200, rng=None):
    """Spearman of x against ``n_draws`` permutations of y."""
    y = np.asarray(y, dtype=np.float64)
    return np.array([spearman(x, y[rng.permutation(y.size)]) for _ in range(n_draws)])


@dataclass
class CorrelationSuite:
    n: int
    low_sample: bool
    rho_pgap_gain: float
    rho_combined: float
    null_pgap_q95: float
    null_combined_q95: float
    null_abs_below_half: float  # share of |rho_null| < 0.5 for P_gap vs gain
    slope: float
    intercept: float
    kappa: float
    z_combined: np.ndarray
    z_after: np.ndarray


def correlation_suite(reports, rng, n_null=200):
    n = len(reports)
    low = n < 5
    if low:
        warnings.warn(f"correlation suite on {n} checkpoints", LowSampleWarning, stacklevel=2)
    pg = np.array([r.p_gap for r in reports])
    gain = np.array([r.mean_gain for r in reports])
    rb = np.array([r.r_before for r in reports])
    ra = np.array([np.mean(list(r.r_after.values())) for r in reports])
    zc = zscore(rb) + zscore(pg)
    za = zscore(ra)
    rho1 = spearman(pg, gain)
    rho2 = spearman(zc, za)
    null1 = shuffle_null(pg, gain, n_null, rng)
    null2 = shuffle_null(zc, za, n_null, rng)
    slope, icpt = affine_fit(pg, gain)
    return CorrelationSuite(n, low, rho1, rho2, float(np.nanquantile(null1, 0.95)),
                            float(np.nanquantile(null2, 0.95)), float(np.mean(np.abs(null1) < 0.5)),
                            slope, icpt, origin_fit(pg, gain), zc, za)
