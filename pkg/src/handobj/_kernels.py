"""Hot numeric kernels with optional numba acceleration.

The numpy fallbacks are always available and numerically equivalent; the
jitted versions only change throughput. Whichever path is selected at import
time is used for the whole process, so results stay reproducible run to run.
"""

import warnings

import numpy as np

try:
    with warnings.catch_warnings():
        # The TBB-version notice is harmless; numba falls back to its
        # default threading layer.
        warnings.simplefilter("ignore")
        from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def _softmax_rows_np(x):
    m = x.max(axis=-1, keepdims=True)
    p = np.exp(x - m)
    p /= p.sum(axis=-1, keepdims=True)
    return p


def _softmax_rows_bwd_np(p, g):
    return p * (g - (p * g).sum(axis=-1, keepdims=True))


def _adam_update_np(values, grad, m, v, lr_t, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    values -= lr_t * m / (np.sqrt(v) + eps)


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _softmax_rows_nb(x):  # pragma: no cover - numba object
        out = np.empty_like(x)
        n, m = x.shape
        for i in prange(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                e = np.exp(x[i, j] - mx)
                out[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                out[i, j] *= inv
        return out

    @njit(parallel=True, cache=True)
    def _softmax_rows_bwd_nb(p, g):  # pragma: no cover - numba object
        out = np.empty_like(p)
        n, m = p.shape
        for i in prange(n):
            dot = 0.0
            for j in range(m):
                dot += p[i, j] * g[i, j]
            for j in range(m):
                out[i, j] = p[i, j] * (g[i, j] - dot)
        return out

    @njit(parallel=True, cache=True)
    def _adam_update_nb(values, grad, m, v, lr_t, beta1, beta2, eps):  # pragma: no cover
        flat_w = values.ravel()
        flat_g = grad.ravel()
        flat_m = m.ravel()
        flat_v = v.ravel()
        for i in prange(flat_w.size):
            gi = flat_g[i]
            mi = beta1 * flat_m[i] + (1.0 - beta1) * gi
            vi = beta2 * flat_v[i] + (1.0 - beta2) * gi * gi
            flat_m[i] = mi
            flat_v[i] = vi
            flat_w[i] -= lr_t * mi / (np.sqrt(vi) + eps)

    softmax_rows = _softmax_rows_nb
    softmax_rows_bwd = _softmax_rows_bwd_nb
    adam_update = _adam_update_nb
else:
    softmax_rows = _softmax_rows_np
    softmax_rows_bwd = _softmax_rows_bwd_np
    adam_update = _adam_update_np
