"""Score-function and pathwise gradient estimators for a Gaussian shift policy.

One-step setting: F(theta) = E_{a ~ N(mean(theta), sigma^2 I)} r(a).  Both
estimators are built on the same draws so their difference can be tested
with a paired standard error.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class BanditSpec:
    """``reward`` maps a batch of actions (n, m) to (n,); ``mean`` maps theta to (m,)."""

    reward: object
    mean: object
    sigma: float
    state: object = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class BridgeReport:
    sf_mean: np.ndarray
    pd_mean: np.ndarray
    gap: np.ndarray
    se: np.ndarray
    variance_ratio: np.ndarray
    passed: bool


def _mean_jacobian(spec, theta):
    """d mean / d theta, shape (m, p)."""
    return ad.dense_jacobian(lambda th: spec.mean(th).reshape(-1), theta)


def _draw(spec, theta, n, rng):
    mu = np.atleast_1d(spec.mean(ad.Tensor(theta)).data)
    xi = spec.sigma * rng.standard_normal((n, mu.size))
    return mu, mu + xi


def _reward_and_grad(reward, a, weight=None):
    """Per-sample r(a) and dr/da via one batched sweep (samples are independent)."""
    with ad.Tape() as tp:
        at = tp.leaf(a)
        r = reward(at)
        if weight is not None:
            r = ad.stop_gradient(np.asarray(weight, dtype=np.float64)) * r
        if not isinstance(r, ad.Tensor) or r.node is None:
            return np.broadcast_to(np.asarray(getattr(r, "data", r), dtype=np.float64), a.shape[:1]).copy(), np.zeros_like(a)
        g = tp.backward(r.sum(), wrt=[at])[at]
    return r.data, g


def _score_wrt_mean(a, mu, sigma):
    """d log N(a; mu, sigma^2 I)/d mu per sample, differentiated on a tape."""
    n = a.shape[0]
    with ad.Tape() as tp:
        m = tp.leaf(np.broadcast_to(mu, a.shape).copy())
        d = a - m
        logp = -(d * d).sum() / (2.0 * sigma * sigma)
        g = tp.backward(logp, wrt=[m])[m]
    return g.reshape(n, -1)


def _se(x):
    return x.std(axis=0, ddof=1) / np.sqrt(x.shape[0])


def sf_samples(spec, theta, a, mu, weight=None):
    J = _mean_jacobian(spec, theta)
    r, _ = _reward_and_grad(spec.reward, a, None)
    if weight is not None:
        r = np.asarray(weight) * r
    return (r[:, None] * _score_wrt_mean(a, mu, spec.sigma)) @ J


def pd_samples(spec, theta, a, weight=None):
    J = _mean_jacobian(spec, theta)
    _, g = _reward_and_grad(spec.reward, a, weight)
    return g @ J


def sf_estimate(spec, theta, n, rng):
    """Mean and standard error of r(a) d log pi(a)/d theta."""
    if n < 2:
        raise ValueError("n must be at least 2")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    mu, a = _draw(spec, theta, n, rng)
    x = sf_samples(spec, theta, a, mu)
    return x.mean(axis=0), _se(x)


def pd_estimate(spec, theta, n, rng):
    """Mean and standard error of (d mean/d theta)^T dr/da."""
    if n < 2:
        raise ValueError("n must be at least 2")
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    _, a = _draw(spec, theta, n, rng)
    x = pd_samples(spec, theta, a)
    return x.mean(axis=0), _se(x)


def _report(sf, pd, k=4.0):
    diff = sf - pd
    se = _se(diff)
    gap = np.abs(diff.mean(axis=0))
    vs, vp = sf.var(axis=0, ddof=1), pd.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(vp > 0, vs / np.where(vp > 0, vp, 1.0), np.inf)
    passed = bool(np.all((gap < k * se) | (gap == 0.0)))
    return BridgeReport(sf.mean(axis=0), pd.mean(axis=0), gap, se, ratio, passed)


def bridge_samples(spec, theta, n, rng):
    """Per-sample SF and PD gradient estimates on common draws, each (n, p)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    mu, a = _draw(spec, theta, n, rng)
    return sf_samples(spec, theta, a, mu), pd_samples(spec, theta, a)


def bridge_gap(spec, theta, n, rng, k=4.0):
    """SF vs PD on common draws; passes iff |gap| < k * paired SE per coordinate."""
    return _report(*bridge_samples(spec, theta, n, rng), k)


def weighted_bridge(spec, weight, theta, n, rng, k=4.0):
    """E[w r d log pi/d theta] vs (d mean/d theta)^T E[d(w r)/da] with w held constant.

    ``weight`` is a scalar or one value per sample.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    mu, a = _draw(spec, theta, n, rng)
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (n,))
    return _report(sf_samples(spec, theta, a, mu, w), pd_samples(spec, theta, a, w), k)


# test rewards on a scalar action with mean(theta) = theta
def identity_mean(th):
    return th


def scalar_spec(kind, sigma=1.0):
    rewards = {
        "const": lambda a: a[:, 0] * 0.0 + 3.0,
        "linear": lambda a: a[:, 0],
        "square": lambda a: a[:, 0] * a[:, 0],
        "sin": lambda a: ad.sin(a[:, 0]),
    }
    return BanditSpec(rewards[kind], identity_mean, sigma)
