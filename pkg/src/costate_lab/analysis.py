"""Empirical costates in hidden-state space and the Jacobian audits around them.

Conventions (0-based positions):

* ``action_positions`` are the positions whose logits produced a sampled token.
* The anchor layer l* picks which hidden state h_t^{(l*)} costates and
  Jacobians are taken against.  The attention-pathway Jacobian is
  J_{k<-t} = d h_k^{(L)} / d h_t^{(l*)} with tokens held fixed.  At l* = L this
  is the same-layer object (identity at k = t); for l* < L it is the map from
  the anchor layer to the top layer, the only nonzero cross-position object in
  a standard decoder.
* The relaxed graph replaces the token embedding at positions after a
  divergence point by the soft embedding softmax(z/tau) @ E.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .rng import stream


@dataclass(frozen=True)
class CostateProbe:
    layer: int = None  # anchor layer; None -> L - 1
    tau: float = 1.0
    iters: int = 50
    tol: float = 1e-9
    gamma: float = 1.0
    relax_mode: str = "soft"
    det_entropy: float = 1e-14  # positions below this entropy count as deterministic

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def anchor(self, cfg):
        l = cfg.n_layers - 1 if self.layer is None else self.layer
        if not 0 <= l <= cfg.n_layers:
            raise ValueError(f"anchor layer {l} outside [0, {cfg.n_layers}]")
        return l


@dataclass
class HiddenCostates:
    values: np.ndarray  # (n_positions, d)
    positions: np.ndarray
    provenance: str


def _leaf_params(trace, tape):
    # parameters as leaves so every hidden state of the replay is recorded
    return {k: tape.leaf(v.data, k) for k, v in trace.params.items()}


def replay(trace, tokens=None, relax_from=None, tau=1.0, relax_mode="soft", stop_soft=False,
           blocked=(), perturb=None, params=None):
    """Rebuild ``trace`` (optionally relaxed) on a fresh tape."""
    tokens = trace.tokens if tokens is None else tokens
    tape = ad.Tape()
    with tape:
        P = _leaf_params(trace, tape) if params is None else params
        out = tf.run_trace(P, trace.config, tokens, trace.n_prefix, tape, trace.temperature, relax_from, tau,
                           relax_mode, stop_soft, blocked, trace.gumbel, perturb=perturb)
    return out


def _check_adv(trace, advantages):
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if adv.size != len(trace.action_positions):
        raise ValueError(f"{adv.size} advantages for {len(trace.action_positions)} action positions")
    return adv


def _suffix_objective(trace, adv, t):
    """sum over action positions k >= t of A_k * l_k, as a node on the trace tape."""
    pairs = [(float(a), lp) for a, lp, k in zip(adv, trace.logprob, trace.action_positions) if k >= t]
    if not pairs:
        return None
    with trace.tape:
        obj = pairs[0][1] * pairs[0][0]
        for a, lp in pairs[1:]:
            obj = obj + lp * a
    return obj


def _grad_at(trace, obj, node):
    if obj is None:
        return np.zeros(node.shape[-1])
    return trace.tape.backward(obj, wrt=[node])[node].reshape(-1)


def empirical_costates(trace, advantages, probe=CostateProbe(), positions=None):
    """lambda_hat_t = d/d h_t^{(l*)} sum_{k >= t} A_k l_k, one pruned sweep per position."""
    adv = _check_adv(trace, advantages)
    l = probe.anchor(trace.config)
    pos = trace.action_positions if positions is None else np.asarray(positions)
    vals = np.stack([_grad_at(trace, _suffix_objective(trace, adv, t), trace.h(t, l)) for t in pos])
    return HiddenCostates(vals, pos, "empirical-autodiff")


def jacobians_to(trace, outs, wrt):
    """Stacked dense Jacobians d outs[i] / d wrt in one batched sweep; (n, d_out, d_in)."""
    n = len(outs)
    d_out = outs[0].shape[-1]
    with trace.tape:
        Y = ad.concat(list(outs), 0)
    m = n * d_out
    if m > ad.DENSE_ROW_GUARD:
        raise ad.ShapeError(f"{m} Jacobian rows exceed guard {ad.DENSE_ROW_GUARD}")
    seeds = np.eye(m).reshape(m, n, d_out)
    g = trace.tape.backward(Y, seeds, wrt=[wrt], batched=True)[wrt]
    return g.reshape(n, d_out, -1).transpose(0, 1, 2)


def attention_jacobian(trace, k, t, probe=CostateProbe()):
    """J_{k<-t} = d h_k^{(L)} / d h_t^{(l*)} with sampled tokens fixed."""
    l = probe.anchor(trace.config)
    return jacobians_to(trace, [trace.h(k, -1)], trace.h(t, l))[0]


def costate_decomposition_check(trace, advantages, probe=CostateProbe()):
    """Rebuild lambda_hat two ways and compare with the autodiff costates.

    (a) direct sum  sum_{k>=t} A_k (d l_k / d h_k^{(L)}) J_{k<-t};
    (b) single-step recursion  A_t d l_t / d h_t^{(l*)} + Jbar_{t+1<-t}^T (b)_{t+1}
        with the same-layer Jacobian Jbar = d h_{t+1}^{(l*)} / d h_t^{(l*)}.
    """
    adv = _check_adv(trace, advantages)
    l = probe.anchor(trace.config)
    acts = trace.action_positions
    truth = empirical_costates(trace, adv, probe).values
    top = [trace.h(k, -1) for k in acts]
    dl_top = np.stack([_grad_at(trace, trace.logprob[i], top[i]) for i in range(len(acts))])
    dl_anchor = np.stack([_grad_at(trace, trace.logprob[i], trace.h(t, l)) for i, t in enumerate(acts)])
    direct = np.zeros_like(truth)
    for i, t in enumerate(acts):
        J = jacobians_to(trace, top[i:], trace.h(t, l))
        direct[i] = np.einsum("k,kd,kde->e", adv[i:], dl_top[i:], J)
    rec = np.zeros_like(truth)
    for i in range(len(acts) - 1, -1, -1):
        rec[i] = adv[i] * dl_anchor[i]
        if i + 1 < len(acts):
            Jbar = jacobians_to(trace, [trace.h(acts[i + 1], l)], trace.h(acts[i], l))[0]
            rec[i] += Jbar.T @ rec[i + 1]
    return DecompositionReport(l, acts, truth, direct, rec,
                               np.abs(direct - truth).max(axis=1), np.abs(rec - truth).max(axis=1))


@dataclass
class DecompositionReport:
    layer: int
    positions: np.ndarray
    autodiff: np.ndarray
    direct: np.ndarray
    recursion: np.ndarray
    direct_residual: np.ndarray
    recursion_residual: np.ndarray


# ----------------------------------------------------------- sampling gap


def relaxed_transition_jacobian(trace, t, probe=CostateProbe(), with_factors=False):
    """(Df_exact, J_attn) for the step t -> t+1 on the relaxed graph.

    Df_exact lets the gradient through the soft embedding fed to t+1; J_attn is
    the same graph with that embedding detached, so their difference is exactly
    the sampling path.
    """
    l = probe.anchor(trace.config)
    toks = trace.tokens[: t + 2]
    if len(toks) < t + 2:
        raise ValueError(f"no position {t + 1} in the trace")
    kw = dict(tokens=toks, relax_from=t, tau=probe.tau, relax_mode=probe.relax_mode)
    full = replay(trace, **kw)
    cut = replay(trace, stop_soft=True, **kw)
    Df = jacobians_to(full, [full.h(t + 1, -1)], full.h(t, l))[0]
    J = jacobians_to(cut, [cut.h(t + 1, -1)], cut.h(t, l))[0]
    if not with_factors:
        return Df, J
    return Df, J, _soft_path_factors(full, t, l, probe.tau)


def _soft_path_factors(g, t, l, tau):
    """d h_{t+1}^{(L)}/d x_{t+1}, d x/d z = E^T Cov(p)/tau, d z_t/d h_t^{(l)} on graph ``g``."""
    x_in = g.h(t + 1, 0)
    A = jacobians_to(g, [g.h(t + 1, -1)], x_in)[0]
    z = g.logits[t]
    C = jacobians_to(g, [z], g.h(t, l))[0]
    p = np.exp(z.data[0] / tau - np.logaddexp.reduce(z.data[0] / tau))
    E = g.params["wte"].data
    B = E.T @ (np.diag(p) - np.outer(p, p)) / tau
    return A, B, C


@dataclass
class GapRecord:
    t: int
    entropy: float
    gap: float
    bound: float
    intermediate: float
    cov_norm: float
    attn_norm: float
    attn_rank: int
    violation: bool


def numerical_rank(M, rtol=1e-8):
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def sampling_gap_bound(trace, t, probe=CostateProbe(), C=1.0, seed=0):
    """Measured ||Df_exact - J_attn|| against C sqrt(H_t / log|V|)."""
    Df, J = relaxed_transition_jacobian(trace, t, probe)
    D = Df - J
    rng = stream(seed, "gap", int(t))
    g = ad.operator_norm(D, iters=probe.iters, tol=probe.tol, rng=rng) if np.any(D) else 0.0
    V = trace.config.vocab_size
    H = float(trace.entropy[t])
    bound = C * math.sqrt(max(H, 0.0) / math.log(V))
    z = trace.z(t) / probe.tau
    p = np.exp(z - np.logaddexp.reduce(z))
    inter = (1.0 - float(p @ p)) / probe.tau
    cov = float(np.max(np.linalg.eigvalsh(np.diag(p) - np.outer(p, p))))
    Jd = attention_jacobian(trace, t + 1, t, probe)
    jn = ad.operator_norm(Jd, iters=probe.iters, tol=probe.tol, rng=stream(seed, "jn", int(t))) if np.any(Jd) else 0.0
    return GapRecord(int(t), H, float(g), bound, inter, cov, float(jn), numerical_rank(Jd), bool(g > bound))


def gap_ratio(rec, V):
    if rec.entropy <= 0:
        return 0.0 if rec.gap == 0 else math.inf
    return rec.gap / math.sqrt(rec.entropy / math.log(V))


def fit_C(records, V):
    """Smallest C with zero violations on ``records`` (max ratio gap / sqrt(H/log|V|))."""
    ratios = [gap_ratio(r, V) for r in records if r.entropy > 1e-12]
    return max(ratios) if ratios else 0.0


def sharpen(ckpt, c):
    """Checkpoint whose logits are c times the original (head weight and bias scaled)."""
    arrs = ckpt.arrays()
    return ckpt.with_array("head", c * arrs["head"]).with_array("head_b", c * arrs["head_b"])


# -------------------------------------------------------------- accumulation audit


@dataclass
class AccumulationRecord:
    positions: np.ndarray
    measured: np.ndarray
    bound_product: np.ndarray
    bound_uniform: np.ndarray
    entropy: np.ndarray
    deterministic: np.ndarray  # every step from t on has H < probe.det_entropy


def relaxed_costates(trace, advantages, t, probe=CostateProbe()):
    """Costates at action positions >= t on the graph relaxed after t."""
    adv = _check_adv(trace, advantages)
    l = probe.anchor(trace.config)
    g = replay(trace, relax_from=t, tau=probe.tau, relax_mode=probe.relax_mode)
    pos = trace.action_positions[trace.action_positions >= t]
    vals = np.stack([_grad_at(g, _suffix_objective(g, adv, k), g.h(k, l)) for k in pos])
    return HiddenCostates(vals, pos, "recursion-reconstructed"), g


def accumulation_bound(trace, advantages, probe=CostateProbe(), C=None, gaps=None, seed=0):
    """Per-position accumulation bound vs the measured discrete/relaxed costate gap.

    eps_k = gap_{k-1} ||lambda_k|| with gap_{k-1} = C sqrt(H_{k-1}/log|V|) (or the
    measured gaps when ``gaps`` maps position -> gap).  Chain factors are the
    operator norms of J_{j<-j-1} on the discrete trace.
    """
    if C is None and gaps is None:
        raise ValueError("supply a constant C or measured per-step gaps")
    adv = _check_adv(trace, advantages)
    acts = trace.action_positions
    V = trace.config.vocab_size
    lam_hat = empirical_costates(trace, adv, probe).values
    jn = {}
    for j in acts[1:]:
        Jd = attention_jacobian(trace, j, j - 1, probe)
        jn[j] = ad.operator_norm(Jd, iters=probe.iters, tol=probe.tol, rng=stream(seed, "chain", int(j))) if np.any(Jd) else 0.0
    jmax = max(jn.values()) if jn else 0.0
    n = len(acts)
    meas = np.zeros(n)
    bp = np.zeros(n)
    bu = np.zeros(n)
    det = np.zeros(n, dtype=bool)
    for i, t in enumerate(acts):
        rel, _ = relaxed_costates(trace, adv, t, probe)
        meas[i] = np.linalg.norm(lam_hat[i] - rel.values[0])
        det[i] = bool(np.all(trace.entropy[t:acts[-1] + 1] < probe.det_entropy))
        for m, k in enumerate(acts[i + 1 :], start=1):
            if gaps is not None:
                gk = gaps[k - 1]
            else:
                gk = C * math.sqrt(max(trace.entropy[k - 1], 0.0) / math.log(V))
            eps_k = gk * np.linalg.norm(rel.values[m])
            w = probe.gamma ** (k - t)
            prod = np.prod([jn[j] for j in acts if t + 1 <= j <= k - 1]) if k - 1 >= t + 1 else 1.0
            bp[i] += w * prod * eps_k
            bu[i] += w * jmax ** (k - t - 1) * eps_k
    return AccumulationRecord(acts, meas, bp, bu, trace.entropy[acts], det)


# ------------------------------------------------------------------ rank


@dataclass
class RankReport:
    rank: int
    bound: int
    dim_bound: int
    layers_bound: int
    singular_values: np.ndarray
    passed: bool


def attention_rank_check(J, cfg, layer=None, rtol=1e-8):
    """Numerical rank of an attention-pathway Jacobian against L * d_head * n_heads."""
    s = np.linalg.svd(np.asarray(J), compute_uv=False)
    r = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    bound = cfg.n_layers * cfg.d_head * cfg.n_heads
    crossed = cfg.n_layers - (cfg.n_layers - 1 if layer is None else layer)
    return RankReport(r, bound, min(J.shape), max(crossed, 0) * cfg.d_head * cfg.n_heads, s, r <= bound)


def attention_mass(trace, k, t, from_layer=0):
    """Summed attention weight from query k to key t over layers >= from_layer and heads."""
    return float(sum(w[:, t].sum() for w in trace.attn[k][from_layer:]))


def rank_survey(trace, probe=CostateProbe()):
    """All cross-position pairs k > t: rank report, ||J||, attention mass, and their correlation."""
    l = probe.anchor(trace.config)
    rows = []
    T = trace.T
    for t in range(T - 1):
        Js = jacobians_to(trace, [trace.h(k, -1) for k in range(t + 1, T)], trace.h(t, l))
        for k, J in zip(range(t + 1, T), Js):
            rep = attention_rank_check(J, trace.config, l)
            rows.append((k, t, rep.rank, float(rep.singular_values[0]), attention_mass(trace, k, t, l)))
    arr = np.array(rows, dtype=np.float64)
    corr = float(np.corrcoef(arr[:, 3], arr[:, 4])[0, 1]) if len(rows) > 2 and arr[:, 3].std() > 0 else float("nan")
    return arr, corr


# ------------------------------------------------------------- usable signal


@dataclass
class SignalBoundReport:
    inner: float
    sigma: float
    lam: float
    slack: float
    per_sample_slack_min: float
    passed: bool


def usable_signal_bound_check(lam_hat, G, slack_tol=1e-10):
    """E<lam_hat, G> >= Sigma - Lambda with Sigma = E||G||^2, Lambda = E||G|| ||lam_hat - G||."""
    lam_hat = np.asarray(lam_hat, dtype=np.float64).reshape(len(lam_hat), -1)
    G = np.asarray(G, dtype=np.float64).reshape(len(G), -1)
    inner_i = np.einsum("nd,nd->n", lam_hat, G)
    gn = np.linalg.norm(G, axis=1)
    sig_i = gn**2
    lam_i = gn * np.linalg.norm(lam_hat - G, axis=1)
    per = inner_i - (sig_i - lam_i)
    inner, sigma, lam = inner_i.mean(), sig_i.mean(), lam_i.mean()
    slack = inner - (sigma - lam)
    return SignalBoundReport(float(inner), float(sigma), float(lam), float(slack), float(per.min()),
                             bool(slack >= -slack_tol and per.min() >= -slack_tol))
