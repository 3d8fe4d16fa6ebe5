"""Forward/backward kernels for the layers used by the network.

Activations are channels-last, shape ``(G, B, H, W, C)``: ``G`` independent
groups (decoder tracks sharing a kernel size) each with their own weights,
``B`` samples, ``C`` channels. Weights keep the ``(G, out, in, k, k)`` layout.
Each ``*_forward`` returns ``(out, cache)``; ``*_backward`` consumes the cache.
"""
from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


def _im2col(x, k):
    """``(G, B*H*W, k*k*C)`` patches of a zero-padded ``x``."""
    G, B, H, W, C = x.shape
    p = k // 2
    xp = np.zeros((G, B, H + 2 * p, W + 2 * p, C), dtype=x.dtype)
    xp[:, :, p:p + H, p:p + W] = x
    cols = np.empty((G, B, H, W, k, k, C), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, :, a, b] = xp[:, :, a:a + H, b:b + W]
    return cols.reshape(G, B * H * W, k * k * C)


def _wmat(w):
    G, O, C, k, _ = w.shape
    return w.transpose(0, 3, 4, 2, 1).reshape(G, k * k * C, O)


def conv_forward(x, w, b):
    """Stride-1 'same' convolution (cross-correlation) with an odd kernel."""
    G, B, H, W, C = x.shape
    O, k = w.shape[1], w.shape[-1]
    cols = _im2col(x, k)
    y = np.matmul(cols, _wmat(w)).reshape(G, B, H, W, O)
    y += b[:, None, None, None, :]
    return y, (cols, w, x.shape)


def conv_backward(dy, cache, need_dx=True):
    cols, w, xshape = cache
    G, B, H, W, C = xshape
    O, k = w.shape[1], w.shape[-1]
    d2 = dy.reshape(G, B * H * W, O)
    dwm = np.matmul(cols.transpose(0, 2, 1), d2)  # G, kkC, O
    dw = dwm.reshape(G, k, k, C, O).transpose(0, 4, 3, 1, 2)
    db = dy.sum(axis=(1, 2, 3))
    dx = None
    if need_dx:
        # full correlation with the spatially flipped, channel-transposed kernel
        wt = w[:, :, :, ::-1, ::-1].transpose(0, 2, 1, 3, 4)
        dx, _ = conv_forward(dy, wt, np.zeros((G, C), dtype=dy.dtype))
    return dx, dw, db


def deconv_forward(x, w, b):
    """Transposed convolution, 2x2 kernel, stride 2 (exact spatial doubling)."""
    G, B, h, wd, C = x.shape
    O = w.shape[1]
    xm = x.reshape(G, B * h * wd, C)
    wm = w.transpose(0, 2, 3, 4, 1).reshape(G, C, 4 * O)  # (C, p, q, O)
    y = np.matmul(xm, wm).reshape(G, B, h, wd, 2, 2, O)
    y = y.transpose(0, 1, 2, 4, 3, 5, 6).reshape(G, B, 2 * h, 2 * wd, O)
    y += b[:, None, None, None, :]
    return y, (xm, wm, x.shape, w.shape)


def deconv_backward(dy, cache):
    xm, wm, xshape, wshape = cache
    G, B, h, wd, C = xshape
    O = wshape[1]
    d2 = dy.reshape(G, B, h, 2, wd, 2, O).transpose(0, 1, 2, 4, 3, 5, 6).reshape(G, B * h * wd, 4 * O)
    dw = np.matmul(xm.transpose(0, 2, 1), d2).reshape(G, C, 2, 2, O).transpose(0, 4, 1, 2, 3)
    dx = np.matmul(d2, wm.transpose(0, 2, 1)).reshape(xshape)
    db = dy.sum(axis=(1, 2, 3))
    return dx, dw, db


def _c(v):
    return v[:, None, None, None, :]


def bn_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel batch normalization over the (B, H, W) axes.

    Train mode normalizes with batch statistics and returns them in the cache
    so the caller can update running estimates; eval mode uses the running ones.
    """
    if train:
        mean = x.mean(axis=(1, 2, 3))
        xc = x - _c(mean)
        var = (xc * xc).mean(axis=(1, 2, 3))
    else:
        mean, var = running_mean, running_var
        xc = x - _c(mean)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = xc * _c(inv)
    y = xhat * _c(gamma) + _c(beta)
    return y, (xhat, inv, gamma, mean, var, train)


def bn_backward(dy, cache):
    xhat, inv, gamma, _, _, train = cache
    dgamma = (dy * xhat).sum(axis=(1, 2, 3))
    dbeta = dy.sum(axis=(1, 2, 3))
    if not train:
        return dy * _c(gamma * inv), dgamma, dbeta
    m = dy.shape[1] * dy.shape[2] * dy.shape[3]
    # dxhat = dy*gamma, so its channel sums are gamma*dbeta and gamma*dgamma
    dx = (dy - _c(dbeta / m) - xhat * _c(dgamma / m)) * _c(gamma * inv)
    return dx, dgamma, dbeta


def relu_forward(x, mask=None):
    """``mask`` replays a previously recorded activation pattern."""
    if mask is None:
        mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def maxpool_forward(x, idx=None):
    """2x2 max pooling, stride 2. Gradient goes to the first maximal entry.

    ``idx`` replays previously recorded winner positions.
    """
    G, B, H, W, C = x.shape
    h, w = H // 2, W // 2
    xr = x.reshape(G, B, h, 2, w, 2, C).transpose(0, 1, 2, 4, 6, 3, 5).reshape(G, B, h, w, C, 4)
    if idx is None:
        idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool_backward(dy, cache):
    idx, xshape = cache
    G, B, H, W, C = xshape
    h, w = H // 2, W // 2
    d = np.zeros((G, B, h, w, C, 4), dtype=dy.dtype)
    np.put_along_axis(d, idx[..., None], dy[..., None], axis=-1)
    return d.reshape(G, B, h, w, C, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4).reshape(xshape)


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def concat_forward(a, b):
    return np.concatenate([a, b], axis=-1), a.shape[-1]


def concat_backward(dy, split):
    return dy[..., :split], dy[..., split:]


def bce_with_logits(z, t):
    """Mean binary cross-entropy of ``sigmoid(z)`` against targets ``t``.

    Evaluated as ``softplus(z) - t*z`` so no logarithm ever sees 0.
    Returns ``(loss, dloss/dz)``.
    """
    loss = np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    return float(loss.sum() / n), (sigmoid(z) - t) / n
