"""Pure numpy reference kernels.

Every function here has a twin of the same name and signature in the
compiled ``_ckernels`` module; :mod:`cots.kernels` picks one at import.
Inputs are float64; row-wise kernels take 2-D arrays and work on the last axis.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    dgain = np.sum(g * xhat, axis=0)
    dbias = np.sum(g, axis=0)
    dxhat = g * gain
    dx = rstd[:, None] * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu_fwd(x):
    """GELU (tanh form). Returns ``(y, t)``; ``t`` is the tanh term reused by backward."""
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(x, t, g):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    return y * (g - np.sum(g * y, axis=1, keepdims=True))


def rank_counts(scores, true_cols):
    """Number of candidates scoring strictly above the true one, per row."""
    true_cols = np.asarray(true_cols, dtype=np.int64)
    target = scores[np.arange(scores.shape[0]), true_cols]
    return np.sum(scores > target[:, None], axis=1).astype(np.int64)


def pair_fusion_scores(q, c, w1, b1, w2):
    """Score every (query, candidate) pair with a tiny per-pair MLP.

    score[i, j] = tanh((q[i] * c[j]) @ w1 + b1) @ w2. The elementwise product
    makes the hidden layer non-separable, so each pair costs O(d * hidden).
    """
    out = np.empty((q.shape[0], c.shape[0]))
    for i in range(q.shape[0]):
        h = np.tanh((c * q[i]) @ w1 + b1)
        out[i] = h @ w2
    return out
