"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every kernel exists twice: ``np_<name>`` (plain numpy) and ``nb_<name>``
(``@njit``).  The active pair is chosen once at import time from the
``LIMSSR_KERNELS`` environment variable:

* ``numba`` (default when numba imports cleanly)
* ``numpy`` (forced fallback; also used when numba is missing)

Both paths are deterministic.  They are not bitwise identical to each other
(different summation order), only within a few ulps.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in CI
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


_GELU_C = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------


def np_layer_norm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm on a 2-D array. Returns (y, xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def np_layer_norm_bwd(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = (gx - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def np_softmax_fwd(x):
    """Softmax over the last axis of a 2-D array."""
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_causal_softmax_fwd(x):
    """Softmax of each (S, S) slice of a 3-D array over keys j <= query i.

    Entries above the diagonal come out exactly 0 and are never exponentiated.
    """
    s = x.shape[-1]
    keep = np.tri(s, dtype=bool)
    z = np.where(keep, x, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_causal_softmax_bwd(g, y):
    # y is 0 above the diagonal, so the plain softmax rule already zeroes it
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def np_gelu_fwd(x):
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def np_gelu_bwd(g, x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def np_batch_norm_fwd(x, gamma, beta, eps):
    """Batch norm over axis 0 of an (N, C) array. Returns (y, xhat, rstd, mean, var)."""
    mu = x.mean(axis=0)
    xc = x - mu
    var = (xc * xc).mean(axis=0)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd, mu, var


def np_batch_norm_bwd(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    m1 = gx.mean(axis=0)
    m2 = (gx * xhat).mean(axis=0)
    return (gx - m1 - xhat * m2) * rstd, dgamma, dbeta


def np_scatter_add_rows(out, idx, src):
    """out[idx[i]] += src[i] for a 2-D ``out`` and 1-D ``idx``."""
    np.add.at(out, idx, src)
    return out


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def nb_layer_norm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(cache=True)
def nb_layer_norm_bwd(g, xhat, rstd, gamma):
    n, d = g.shape
    dx = np.empty_like(g)
    dgamma = np.zeros(d, dtype=g.dtype)
    dbeta = np.zeros(d, dtype=g.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gx = g[i, j] * gamma[j]
            m1 += gx
            m2 += gx * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx, dgamma, dbeta


@njit(cache=True)
def nb_softmax_fwd(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(d):
            y[i, j] /= s
    return y


@njit(cache=True)
def nb_softmax_bwd(g, y):
    n, d = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx


@njit(cache=True)
def nb_causal_softmax_fwd(x):
    n, s, _ = x.shape
    y = np.zeros_like(x)
    for b in range(n):
        for i in range(s):
            m = x[b, i, 0]
            for j in range(1, i + 1):
                if x[b, i, j] > m:
                    m = x[b, i, j]
            tot = 0.0
            for j in range(i + 1):
                e = math.exp(x[b, i, j] - m)
                y[b, i, j] = e
                tot += e
            for j in range(i + 1):
                y[b, i, j] /= tot
    return y


@njit(cache=True)
def nb_causal_softmax_bwd(g, y):
    n, s, _ = g.shape
    dx = np.zeros_like(g)
    for b in range(n):
        for i in range(s):
            tot = 0.0
            for j in range(i + 1):
                tot += g[b, i, j] * y[b, i, j]
            for j in range(i + 1):
                dx[b, i, j] = y[b, i, j] * (g[b, i, j] - tot)
    return dx


@njit(cache=True)
def nb_gelu_fwd(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
    return out.reshape(x.shape)


@njit(cache=True)
def nb_gelu_bwd(g, x):
    gf = g.ravel()
    xf = x.ravel()
    out = np.empty_like(xf)
    for i in range(xf.size):
        v = xf[i]
        t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
        du = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        out[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out.reshape(x.shape)


@njit(cache=True)
def nb_batch_norm_fwd(x, gamma, beta, eps):
    n, c = x.shape
    mu = np.zeros(c, dtype=x.dtype)
    var = np.zeros(c, dtype=x.dtype)
    for i in range(n):
        for j in range(c):
            mu[j] += x[i, j]
    for j in range(c):
        mu[j] /= n
    for i in range(n):
        for j in range(c):
            d = x[i, j] - mu[j]
            var[j] += d * d
    rstd = np.empty(c, dtype=x.dtype)
    for j in range(c):
        var[j] /= n
        rstd[j] = 1.0 / math.sqrt(var[j] + eps)
    xhat = np.empty_like(x)
    y = np.empty_like(x)
    for i in range(n):
        for j in range(c):
            h = (x[i, j] - mu[j]) * rstd[j]
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd, mu, var


@njit(cache=True)
def nb_batch_norm_bwd(g, xhat, rstd, gamma):
    n, c = g.shape
    dgamma = np.zeros(c, dtype=g.dtype)
    dbeta = np.zeros(c, dtype=g.dtype)
    m1 = np.zeros(c, dtype=g.dtype)
    m2 = np.zeros(c, dtype=g.dtype)
    for i in range(n):
        for j in range(c):
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
            gx = g[i, j] * gamma[j]
            m1[j] += gx
            m2[j] += gx * xhat[i, j]
    dx = np.empty_like(g)
    for i in range(n):
        for j in range(c):
            dx[i, j] = (g[i, j] * gamma[j] - m1[j] / n - xhat[i, j] * m2[j] / n) * rstd[j]
    return dx, dgamma, dbeta


@njit(cache=True)
def nb_scatter_add_rows(out, idx, src):
    d = out.shape[1]
    for i in range(idx.size):
        r = idx[i]
        for j in range(d):
            out[r, j] += src[i, j]
    return out


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

KERNEL_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "softmax_fwd",
    "softmax_bwd",
    "causal_softmax_fwd",
    "causal_softmax_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "batch_norm_fwd",
    "batch_norm_bwd",
    "scatter_add_rows",
)


def _resolve_backend():
    want = os.environ.get("LIMSSR_KERNELS", "numba" if HAS_NUMBA else "numpy").lower()
    if want not in ("numba", "numpy"):
        raise ValueError(f"LIMSSR_KERNELS must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and not HAS_NUMBA:
        want = "numpy"
    return want


BACKEND = _resolve_backend()


def kernel_table(backend):
    """Return {name: callable} for ``backend`` ('numba' or 'numpy')."""
    prefix = "nb_" if backend == "numba" else "np_"
    g = globals()
    return {name: g[prefix + name] for name in KERNEL_NAMES}


_active = kernel_table(BACKEND)
layer_norm_fwd = _active["layer_norm_fwd"]
layer_norm_bwd = _active["layer_norm_bwd"]
softmax_fwd = _active["softmax_fwd"]
softmax_bwd = _active["softmax_bwd"]
causal_softmax_fwd = _active["causal_softmax_fwd"]
causal_softmax_bwd = _active["causal_softmax_bwd"]
gelu_fwd = _active["gelu_fwd"]
gelu_bwd = _active["gelu_bwd"]
batch_norm_fwd = _active["batch_norm_fwd"]
batch_norm_bwd = _active["batch_norm_bwd"]
scatter_add_rows = _active["scatter_add_rows"]
