"""Differentiable rollouts, BPTT costates and the pathwise parameter gradient.

Everything is batched along a leading axis: states are (B, d), actions
(B, m), rewards (B,).  Samples never interact, so a backward sweep seeded with
the batch sum yields per-sample adjoints for state nodes.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import stream

PROVENANCES = ("exact-bptt", "empirical-autodiff", "recursion-reconstructed")


@dataclass
class DiffEnv:
    """Smooth environment.  ``dynamics(s, a, theta)`` and ``reward(s, a)`` take tensors."""

    name: str
    state_dim: int
    action_dim: int
    dynamics: object
    reward: object
    horizon: int
    gamma: float = 1.0
    init_scale: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def init_states(self, rng, n):
        return self.init_scale * rng.standard_normal((n, self.state_dim))


@dataclass
class ShiftPolicy:
    """a = mean(s, theta) + xi, xi ~ N(0, noise_std^2 I) independent of theta."""

    mean: object
    action_dim: int
    noise_std: float = 0.0

    def act(self, s, theta, xi):
        return self.mean(s, theta) + xi


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, B, d)
    actions: np.ndarray  # (T, B, m)
    noises: np.ndarray  # (T, B, m)
    rewards: np.ndarray  # (T, B)
    theta: np.ndarray
    tape: ad.Tape = field(repr=False)
    s_nodes: list = field(repr=False)
    r_nodes: list = field(repr=False)
    theta_node: ad.Tensor = field(repr=False)
    env: DiffEnv = field(repr=False)
    policy: ShiftPolicy = field(repr=False)

    @property
    def T(self):
        return self.actions.shape[0]

    def returns(self, t=0):
        g = self.env.gamma
        w = g ** np.arange(self.T - t)
        return (w[:, None] * self.rewards[t:]).sum(axis=0)


@dataclass
class CostateSeries:
    lam: np.ndarray  # (T+1, B, d); lam[T] is the terminal zero
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if np.any(self.lam[-1] != 0.0):
            raise ValueError("terminal costate must be exactly zero")


# ------------------------------------------------------------------ rollouts


def draw_noise(env, policy, rng, n):
    """Initial states and action noise, drawn before theta is used."""
    s1 = env.init_states(rng, n)
    xi = policy.noise_std * rng.standard_normal((env.horizon, n, policy.action_dim))
    return s1, xi


def rollout(env, policy, theta, rng=None, n=1, s1=None, noises=None, init_jac=None):
    """Unroll ``env`` under ``policy`` on a fresh tape.

    ``s1``/``noises`` override the draws from ``rng``.  ``init_jac`` (d x p)
    makes the start state depend on theta as s1 + init_jac @ theta; it exists
    only to expose the boundary term of the pathwise gradient.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if s1 is None or noises is None:
        d_s1, d_xi = draw_noise(env, policy, rng, n)
        s1 = d_s1 if s1 is None else s1
        noises = d_xi if noises is None else noises
    s1 = np.atleast_2d(np.asarray(s1, dtype=np.float64))
    noises = np.asarray(noises, dtype=np.float64)
    T = noises.shape[0]
    tape = ad.Tape()
    with tape:
        th = tape.leaf(theta, "theta")
        s = tape.leaf(s1, "s1")
        if init_jac is not None:
            s = s + ad.matmul(th.reshape(1, -1), np.asarray(init_jac, dtype=np.float64).T)
        s_nodes, r_nodes, acts = [s], [], []
        for t in range(T):
            a = policy.act(s, th, noises[t])
            r = env.reward(s, a)
            s = env.dynamics(s, a, th)
            acts.append(a.data)
            r_nodes.append(r)
            s_nodes.append(s)
    return Trajectory(
        states=np.stack([x.data for x in s_nodes]),
        actions=np.stack(acts) if acts else np.zeros((0,) + s1.shape[:1] + (policy.action_dim,)),
        noises=noises,
        rewards=np.stack([x.data for x in r_nodes]) if r_nodes else np.zeros((0, s1.shape[0])),
        theta=theta,
        tape=tape,
        s_nodes=s_nodes,
        r_nodes=r_nodes,
        theta_node=th,
        env=env,
        policy=policy,
    )


def _return_node(traj, t):
    g = traj.env.gamma
    with traj.tape:
        R = traj.r_nodes[t].sum()
        for k in range(t + 1, traj.T):
            R = R + (g ** (k - t)) * traj.r_nodes[k].sum()
    return R


def tape_costates(traj):
    """lambda_t = dR_t/ds_t read directly off the unrolled tape."""
    T, B, d = traj.T, traj.states.shape[1], traj.states.shape[2]
    lam = np.zeros((T + 1, B, d))
    for t in range(T):
        R = _return_node(traj, t)
        lam[t] = traj.tape.backward(R, wrt=[traj.s_nodes[t]])[traj.s_nodes[t]]
    return CostateSeries(lam, "empirical-autodiff")


def _step_map(env, policy, theta, xi):
    """s -> (r(s, pi(s)), f(s, pi(s))) with the noise held fixed."""

    def fn(s):
        a = policy.act(s, theta, xi)
        return env.reward(s, a), env.dynamics(s, a, theta)

    return fn


def bptt_costates(traj):
    """Backward recursion lambda_t = Dr + gamma Df^T lambda_{t+1}.

    Returns (recursion series, direct tape series).  Dr and Df are total
    derivatives through the policy mean, evaluated step by step on local tapes.
    """
    env, pol = traj.env, traj.policy
    T, B, d = traj.T, traj.states.shape[1], traj.states.shape[2]
    lam = np.zeros((T + 1, B, d))
    for t in range(T - 1, -1, -1):
        fn = _step_map(env, pol, traj.theta, traj.noises[t])
        with ad.Tape() as tp:
            s = tp.leaf(traj.states[t])
            r, s_next = fn(s)
            obj = r.sum() + env.gamma * (s_next * lam[t + 1]).sum()
            lam[t] = tp.backward(obj, wrt=[s])[s]
    return CostateSeries(lam, "exact-bptt"), tape_costates(traj)


def pathwise_param_grad(traj, lam):
    """Sum over t of gamma^t [gamma f_theta^T lam_{t+1} + pi_theta^T (r_a + gamma f_a^T lam_{t+1})].

    Summed over the batch.  The boundary term lam_1^T ds_1/dtheta is not
    included; see ``boundary_term``.
    """
    if lam.provenance != "exact-bptt":
        raise ValueError(f"pathwise assembly needs exact-bptt costates, got {lam.provenance}")
    env, pol = traj.env, traj.policy
    grad = np.zeros_like(traj.theta)
    for t in range(traj.T):
        with ad.Tape() as tp:
            th = tp.leaf(traj.theta)
            s = traj.states[t]
            a = pol.act(s, th, traj.noises[t])
            r = env.reward(s, a)
            s_next = env.dynamics(s, a, th)
            obj = r.sum() + env.gamma * (s_next * lam.lam[t + 1]).sum()
            if not isinstance(obj, ad.Tensor) or obj.node is None:
                continue
            grad += (env.gamma**t) * tp.backward(obj, wrt=[th])[th]
    return grad


def boundary_term(traj, lam, init_jac):
    """lam_1^T ds_1/dtheta summed over the batch (the telescoping leftover)."""
    return (lam.lam[0] @ np.asarray(init_jac)).sum(axis=0)


def tape_param_grad(traj):
    """dR_1/dtheta straight off the unrolled tape (oracle for the assembly)."""
    R = _return_node(traj, 0)
    return traj.tape.backward(R, wrt=[traj.theta_node])[traj.theta_node]


# ------------------------------------------------------------ value gradient


@dataclass
class ValueGradientEstimate:
    costate_mean: np.ndarray
    costate_se: np.ndarray
    fd_mean: np.ndarray
    fd_se: np.ndarray

    @property
    def combined_se(self):
        return np.sqrt(self.costate_se**2 + self.fd_se**2)

    def z(self):
        se = self.combined_se
        diff = np.abs(self.costate_mean - self.fd_mean)
        return np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))


def _sub_env(env, t):
    return DiffEnv(env.name, env.state_dim, env.action_dim, env.dynamics, env.reward,
                   env.horizon - t, env.gamma, env.init_scale)


def value_gradient_oracle(env, policy, theta, s, t, n_samples, eps=1e-3, rng=None):
    """Two estimates of dV_t/ds at s (t is 0-based).

    (a) mean costate over rollouts started at s_t = s; (b) central FD of the
    Monte Carlo value with the same noise draws on both sides of every probe.
    """
    s = np.asarray(s, dtype=np.float64)
    d = s.size
    sub = _sub_env(env, t)
    xi = policy.noise_std * rng.standard_normal((sub.horizon, n_samples, policy.action_dim))
    start = np.broadcast_to(s, (n_samples, d)).copy()
    traj = rollout(sub, policy, theta, s1=start, noises=xi)
    lam, _ = bptt_costates(traj)
    lam0 = lam.lam[0]
    cm = lam0.mean(axis=0)
    cse = lam0.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else np.zeros(d)
    fm = np.zeros(d)
    fse = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = eps
        rp = _mc_returns(sub, policy, theta, start + e, xi)
        rm = _mc_returns(sub, policy, theta, start - e, xi)
        diff = (rp - rm) / (2 * eps)
        fm[i] = diff.mean()
        fse[i] = diff.std(ddof=1) / np.sqrt(n_samples) if n_samples > 1 else 0.0
    return ValueGradientEstimate(cm, cse, fm, fse)


def _mc_returns(env, policy, theta, s1, xi):
    total = np.zeros(s1.shape[0])
    s = s1
    for t in range(env.horizon):
        a = policy.act(ad.Tensor(s), theta, xi[t])
        total += (env.gamma**t) * env.reward(ad.Tensor(s), a).data
        s = env.dynamics(ad.Tensor(s), a, theta).data
    return total


# ---------------------------------------------------------- test environments


def lq_env(horizon=3, gamma=1.0, noise_std=0.0):
    """Scalar s' = s + a, r = -s^2, a = theta s + xi."""
    env = DiffEnv("lq", 1, 1, lambda s, a, th: s + a, lambda s, a: -(s * s).sum(axis=1), horizon, gamma)
    pol = ShiftPolicy(lambda s, th: s * th[0:1], 1, noise_std)
    return env, pol


def lq_value_coefficients(theta, horizon, gamma):
    """c_t with V_t(s) = -c_t s^2 + const (0-based t)."""
    c = np.zeros(horizon)
    c[-1] = 1.0
    for t in range(horizon - 2, -1, -1):
        c[t] = 1.0 + gamma * c[t + 1] * (1.0 + theta) ** 2
    return c


def lingauss_env(seed=0, horizon=5, gamma=0.95, noise_std=0.3, d=4, m=2):
    """s' = A s + B a with spectral radius of A at 0.8; quadratic cost; linear policy."""
    r = np.random.default_rng(seed)
    A = r.standard_normal((d, d))
    A *= 0.8 / np.max(np.abs(np.linalg.eigvals(A)))
    B = r.standard_normal((d, m)) / np.sqrt(d)
    env = DiffEnv(
        "lingauss", d, m,
        lambda s, a, th: ad.matmul(s, A.T) + ad.matmul(a, B.T),
        lambda s, a: -(s * s).sum(axis=1) - 0.1 * (a * a).sum(axis=1),
        horizon, gamma,
    )
    pol = ShiftPolicy(lambda s, th: ad.matmul(s, th[: m * d].reshape(m, d).T), m, noise_std)
    return env, pol, m * d


def tanh_env(seed=0, horizon=5, gamma=0.9, noise_std=0.2, d=4, m=2):
    """s' = tanh(A s + B a + b), b part of theta; smooth non-quadratic reward."""
    r = np.random.default_rng(seed + 1)
    A = 0.9 * r.standard_normal((d, d)) / np.sqrt(d)
    B = r.standard_normal((d, m)) / np.sqrt(d)
    target = 0.3 * r.standard_normal(d)
    k = m * d

    def dyn(s, a, th):
        return ad.tanh(ad.matmul(s, A.T) + ad.matmul(a, B.T) + th[k : k + d])

    def rew(s, a):
        diff = s - target
        return -(diff * diff).sum(axis=1) + 0.5 * ad.sin(s).sum(axis=1) - 0.05 * (a * a).sum(axis=1)

    env = DiffEnv("tanh", d, m, dyn, rew, horizon, gamma)
    pol = ShiftPolicy(lambda s, th: ad.tanh(ad.matmul(s, th[:k].reshape(m, d).T)), m, noise_std)
    return env, pol, k + d


def make_env(name, seed=0, **kw):
    """(env, policy, theta0) for one of the three test environments."""
    if name == "lq":
        env, pol = lq_env(**kw)
        return env, pol, np.array([-0.5])
    if name == "lingauss":
        env, pol, p = lingauss_env(seed, **kw)
    elif name == "tanh":
        env, pol, p = tanh_env(seed, **kw)
    else:
        raise ValueError(f"unknown env {name!r}")
    return env, pol, 0.3 * stream(seed, "theta0", name).standard_normal(p)
