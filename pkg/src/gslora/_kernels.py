"""Row-wise numeric kernels used by the autodiff engine.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback.
The numba path is used when numba imports cleanly and ``GSLORA_NUMBA`` is not
set to ``0``/``false``/``off``. Both paths operate on 2-D float64 arrays whose
last axis is the reduction axis; callers reshape higher-rank tensors first.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_enabled() -> bool:
    flag = os.environ.get("GSLORA_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


USE_NUMBA = numba is not None and _env_enabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def softmax_rows_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward_np(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_rows_np(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_rows_backward_np(g, xhat, rstd, gain):
    n = xhat.shape[1]
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    gx = g * gain
    dx = (rstd[:, None] / n) * (
        n * gx
        - gx.sum(axis=1, keepdims=True)
        - xhat * (gx * xhat).sum(axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def cross_entropy_np(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    losses = lse - shifted[rows, labels]
    probs = np.exp(shifted - lse[:, None])
    return losses.mean(), probs


def cross_entropy_backward_np(probs, labels, g):
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d * (g / n)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def softmax_rows_nb(x):
        n, m = x.shape
        out = np.empty_like(x)
        for i in range(n):
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

    @numba.njit(cache=True)
    def softmax_rows_backward_nb(y, g):
        n, m = y.shape
        out = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += g[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @numba.njit(cache=True)
    def layer_norm_rows_nb(x, gain, bias, eps):
        n, m = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n)
        for i in range(n):
            mean = 0.0
            for j in range(m):
                mean += x[i, j]
            mean /= m
            var = 0.0
            for j in range(m):
                c = x[i, j] - mean
                var += c * c
            var /= m
            r = 1.0 / np.sqrt(var + eps)
            rstd[i] = r
            for j in range(m):
                h = (x[i, j] - mean) * r
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, rstd

    @numba.njit(cache=True)
    def layer_norm_rows_backward_nb(g, xhat, rstd, gain):
        n, m = xhat.shape
        dx = np.empty_like(xhat)
        dgain = np.zeros(m)
        dbias = np.zeros(m)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(m):
                gx = g[i, j] * gain[j]
                s1 += gx
                s2 += gx * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            scale = rstd[i] / m
            for j in range(m):
                gx = g[i, j] * gain[j]
                dx[i, j] = scale * (m * gx - s1 - xhat[i, j] * s2)
        return dx, dgain, dbias

    @numba.njit(cache=True)
    def cross_entropy_nb(logits, labels):
        n, m = logits.shape
        probs = np.empty_like(logits)
        total = 0.0
        for i in range(n):
            mx = logits[i, 0]
            for j in range(1, m):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(m):
                s += np.exp(logits[i, j] - mx)
            lse = np.log(s)
            for j in range(m):
                probs[i, j] = np.exp(logits[i, j] - mx - lse)
            total += lse - (logits[i, labels[i]] - mx)
        return total / n, probs

    @numba.njit(cache=True)
    def cross_entropy_backward_nb(probs, labels, g):
        n, m = probs.shape
        out = np.empty_like(probs)
        scale = g / n
        for i in range(n):
            for j in range(m):
                out[i, j] = probs[i, j] * scale
            out[i, labels[i]] -= scale
        return out


if USE_NUMBA:
    softmax_rows = softmax_rows_nb
    softmax_rows_backward = softmax_rows_backward_nb
    layer_norm_rows = layer_norm_rows_nb
    layer_norm_rows_backward = layer_norm_rows_backward_nb
    cross_entropy = cross_entropy_nb
    cross_entropy_backward = cross_entropy_backward_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_backward = softmax_rows_backward_np
    layer_norm_rows = layer_norm_rows_np
    layer_norm_rows_backward = layer_norm_rows_backward_np
    cross_entropy = cross_entropy_np
    cross_entropy_backward = cross_entropy_backward_np
