"""Verification suites behind ``costate-lab verify``.

Each suite returns a list of ``Check`` rows; a row passes when ``value`` is
below ``threshold`` (strictly).
"""

import math
from dataclasses import dataclass

import numpy as np

from . import estimators as es
from . import rollout as ro
from .rng import stream

ENVS = ("lq", "lingauss", "tanh")


@dataclass
class Check:
    suite: str
    item: str
    check: str
    value: float
    threshold: float

    @property
    def passed(self):
        return bool(self.value < self.threshold)


def _max_z(diff, se, atol=1e-9):
    # differences below atol count as zero: noise-free steps have se ~ rounding
    diff = np.maximum(np.abs(np.asarray(diff)) - atol, 0.0)
    se = np.asarray(se)
    z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
    return float(np.max(z))


def continuous_checks(envs=ENVS, samples=10_000, seed=0, n_traj=8):
    """Exactness of the costate recursion and the value-gradient identity."""
    rows = []
    for name in envs:
        env, pol, th = ro.make_env(name, seed=seed)
        if name == "lq":
            env, pol = ro.lq_env(horizon=5, gamma=0.9, noise_std=0.4)
        tr = ro.rollout(env, pol, th, rng=stream(seed, "verify", name), n=n_traj)
        lam, direct = ro.bptt_costates(tr)
        rows.append(Check("continuous", name, "recursion_vs_tape", float(np.max(np.abs(lam.lam - direct.lam))), 1e-10))
        g = ro.pathwise_param_grad(tr, lam)
        rows.append(Check("continuous", name, "assembly_vs_tape", float(np.max(np.abs(g - ro.tape_param_grad(tr)))), 1e-10))
        rows += _value_checks(name, samples, seed)
    return rows


def _value_checks(name, samples, seed):
    rows = []
    if name == "lq":
        gamma, th, s, T = 0.9, -0.3, 0.7, 4
        env, pol = ro.lq_env(horizon=T, gamma=gamma, noise_std=0.5)
        c = ro.lq_value_coefficients(th, T, gamma)
        for t in range(T):
            est = ro.value_gradient_oracle(env, pol, [th], [s], t, samples, 1e-3, stream(seed, "value", name, t))
            rows.append(Check("continuous", name, f"costate_vs_fd_t{t}_z", _max_z(est.costate_mean - est.fd_mean, est.combined_se), 4.0))
            rows.append(Check("continuous", name, f"costate_vs_analytic_t{t}_z",
                              _max_z(est.costate_mean + 2 * c[t] * s, est.combined_se), 4.0))
        return rows
    env, pol, th = ro.make_env(name, seed=seed)
    s = 0.4 * stream(seed, "value-start", name).standard_normal(env.state_dim)
    est = ro.value_gradient_oracle(env, pol, th, s, 1, samples, 1e-3, stream(seed, "value", name, 1))
    rows.append(Check("continuous", name, "costate_vs_fd_t1_z", _max_z(est.costate_mean - est.fd_mean, est.combined_se), 4.0))
    return rows


# (reward kind, theta, sigma, analytic gradient)
BRIDGE_CASES = (
    ("linear", 0.0, 1.0, 1.0),
    ("square", 1.0, 1.0, 2.0),
    ("sin", 0.3, 0.5, math.cos(0.3) * math.exp(-0.5**2 / 2)),
)


def bridge_checks(n=100_000, seed=0, n_seeds=10):
    """SF vs PD agreement per seed (4 paired SE) and each seed-pooled mean vs the analytic value (3 SE)."""
    rows = []
    for kind, theta, sigma, exact in BRIDGE_CASES:
        spec = es.scalar_spec(kind, sigma)
        sf_m, pd_m, sf_v, pd_v = [], [], [], []
        for k in range(n_seeds):
            sf, pd = es.bridge_samples(spec, [theta], n, stream(seed, "bridge", kind, k))
            d = sf - pd
            rows.append(Check("bridge", kind, f"sf_vs_pd_seed{k}_z", _max_z(d.mean(axis=0), es._se(d)), 4.0))
            sf_m.append(sf.mean())
            pd_m.append(pd.mean())
            sf_v.append(es._se(sf)[0] ** 2)
            pd_v.append(es._se(pd)[0] ** 2)
        for tag, m, v in (("sf", sf_m, sf_v), ("pd", pd_m, pd_v)):
            se = math.sqrt(np.mean(v) / n_seeds)
            rows.append(Check("bridge", kind, f"{tag}_vs_analytic_z", _max_z(np.mean(m) - exact, se), 3.0))
    return rows
