"""Row-wise numeric kernels with a numba path and a pure-numpy path.

The active implementation is chosen once at import from the environment
variable ``COSTATE_LAB_ACCEL`` (``numba`` or ``numpy``).  Without the variable,
numba is used when it imports cleanly.  Both paths take and return C-contiguous
float64 arrays of shape (rows, n); callers reshape around them.
"""

import math
import os
import types

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------- numpy


def _np_softmax(x, mask):
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_log_softmax(x):
    m = x.max(axis=1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _np_log_softmax_bwd(y, g):
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def _np_layernorm(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_layernorm_bwd(xhat, rstd, gamma, g):
    gh = g * gamma
    n = xhat.shape[1]
    gx = (rstd[:, None] / n) * (
        n * gh - gh.sum(axis=1, keepdims=True) - xhat * (gh * xhat).sum(axis=1, keepdims=True)
    )
    return gx


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def _np_gelu_bwd(x, g):
    u = GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def _np_rank_average(x):
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    n = x.size
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


numpy_kernels = types.SimpleNamespace(
    name="numpy",
    softmax=_np_softmax,
    softmax_bwd=_np_softmax_bwd,
    log_softmax=_np_log_softmax,
    log_softmax_bwd=_np_log_softmax_bwd,
    layernorm=_np_layernorm,
    layernorm_bwd=_np_layernorm_bwd,
    gelu=_np_gelu,
    gelu_bwd=_np_gelu_bwd,
    rank_average=_np_rank_average,
)


# --------------------------------------------------------------------- numba

if HAS_NUMBA:

    @njit(cache=True)
    def _nb_softmax_nomask(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = -np.inf
            for j in range(n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            for j in range(n):
                out[r, j] /= s
        return out

    @njit(cache=True)
    def _nb_softmax_mask(x, mask):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = -np.inf
            for j in range(n):
                if mask[r, j] and x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                if mask[r, j]:
                    e = math.exp(x[r, j] - m)
                else:
                    e = 0.0
                out[r, j] = e
                s += e
            for j in range(n):
                out[r, j] /= s
        return out

    @njit(cache=True)
    def _nb_softmax_bwd(y, g):
        rows, n = y.shape
        out = np.empty_like(g)
        for r in range(rows):
            d = 0.0
            for j in range(n):
                d += g[r, j] * y[r, j]
            for j in range(n):
                out[r, j] = y[r, j] * (g[r, j] - d)
        return out

    @njit(cache=True)
    def _nb_log_softmax(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = -np.inf
            for j in range(n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                s += math.exp(x[r, j] - m)
            ls = math.log(s)
            for j in range(n):
                out[r, j] = x[r, j] - m - ls
        return out

    @njit(cache=True)
    def _nb_log_softmax_bwd(y, g):
        rows, n = y.shape
        out = np.empty_like(g)
        for r in range(rows):
            s = 0.0
            for j in range(n):
                s += g[r, j]
            for j in range(n):
                out[r, j] = g[r, j] - math.exp(y[r, j]) * s
        return out

    @njit(cache=True)
    def _nb_layernorm(x, gamma, beta, eps):
        rows, n = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for j in range(n):
                mu += x[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[r, j] - mu
                var += d * d
            var /= n
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for j in range(n):
                xh = (x[r, j] - mu) * rs
                xhat[r, j] = xh
                out[r, j] = xh * gamma[j] + beta[j]
        return out, xhat, rstd

    @njit(cache=True)
    def _nb_layernorm_bwd(xhat, rstd, gamma, g):
        rows, n = xhat.shape
        out = np.empty_like(g)
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                gh = g[r, j] * gamma[j]
                s1 += gh
                s2 += gh * xhat[r, j]
            c = rstd[r] / n
            for j in range(n):
                gh = g[r, j] * gamma[j]
                out[r, j] = c * (n * gh - s1 - xhat[r, j] * s2)
        return out

    @njit(cache=True)
    def _nb_gelu(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                out[r, j] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + 0.044715 * v * v * v)))
        return out

    @njit(cache=True)
    def _nb_gelu_bwd(x, g):
        rows, n = g.shape
        out = np.empty_like(g)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                th = math.tanh(GELU_C * (v + 0.044715 * v * v * v))
                du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                out[r, j] = g[r, j] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
        return out

    @njit(cache=True)
    def _nb_rank_average(x):
        n = x.size
        order = np.argsort(x, kind="mergesort")
        ranks = np.empty(n)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and x[order[j + 1]] == x[order[i]]:
                j += 1
            r = 0.5 * (i + j) + 1.0
            for k in range(i, j + 1):
                ranks[order[k]] = r
            i = j + 1
        return ranks

    def _nb_softmax(x, mask):
        if mask is None:
            return _nb_softmax_nomask(x)
        return _nb_softmax_mask(x, mask)

    numba_kernels = types.SimpleNamespace(
        name="numba",
        softmax=_nb_softmax,
        softmax_bwd=_nb_softmax_bwd,
        log_softmax=_nb_log_softmax,
        log_softmax_bwd=_nb_log_softmax_bwd,
        layernorm=_nb_layernorm,
        layernorm_bwd=_nb_layernorm_bwd,
        gelu=_nb_gelu,
        gelu_bwd=_nb_gelu_bwd,
        rank_average=_nb_rank_average,
    )
else:  # pragma: no cover
    numba_kernels = None


def select(name=None):
    """Kernel namespace for ``name`` (``numba``/``numpy``), or the env default."""
    if name is None:
        name = os.environ.get("COSTATE_LAB_ACCEL", "numba" if HAS_NUMBA else "numpy")
    name = name.strip().lower()
    if name == "numba":
        if numba_kernels is None:
            raise RuntimeError("COSTATE_LAB_ACCEL=numba but numba is not importable")
        return numba_kernels
    if name == "numpy":
        return numpy_kernels
    raise ValueError(f"unknown accelerator {name!r}; expected 'numba' or 'numpy'")


K = select()
