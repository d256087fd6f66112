"""Fused inner loops for the memory-bound tensor ops.

Each kernel has a vectorized numpy reference implementation and, when
numba is importable, a single-threaded JIT-compiled twin (cached to disk,
deterministic: no parallel reductions). The module exposes whichever is
available; tests cross-check the two on random inputs.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is normally present
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def decorate(fn):
            return fn

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return decorate


# ---------------------------------------------------------------------------
# batch-norm statistics and backward


def bn_stats_np(x):
    """Per-channel mean and biased variance over (batch, H, W), float64 accum."""
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = x64.var(axis=(0, 2, 3))
    return mean.astype(x.dtype), var.astype(x.dtype)


@njit(cache=True)
def _bn_stats_nb(x):
    b, c, h, w = x.shape
    n = b * h * w
    mean = np.zeros(c, dtype=np.float64)
    sq = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            acc = 0.0
            acc2 = 0.0
            for hi in range(h):
                for wi in range(w):
                    v = float(x[bi, ci, hi, wi])
                    acc += v
                    acc2 += v * v
            mean[ci] += acc
            sq[ci] += acc2
    mean /= n
    var = sq / n - mean * mean
    return mean, var


def bn_stats_nb(x):
    mean, var = _bn_stats_nb(x)
    return mean.astype(x.dtype), np.maximum(var, 0.0).astype(x.dtype)


def bn_backward_np(x, g, mean, inv_std, gamma, training):
    """Returns (dx, dgamma, dbeta) for the per-channel normalization."""
    xhat = x * inv_std[None, :, None, None] - (mean * inv_std)[None, :, None, None]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mean_g = dbeta[None, :, None, None] / n
        mean_gx = dgamma[None, :, None, None] / n
        dx = scale * (g - mean_g - xhat * mean_gx)
    else:
        dx = scale * g
    return dx, dgamma, dbeta


@njit(cache=True)
def _bn_backward_nb(x, g, mean, inv_std, gamma, training):
    b, c, h, w = x.shape
    n = b * h * w
    dgamma = np.zeros(c, dtype=np.float64)
    dbeta = np.zeros(c, dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            m = float(mean[ci])
            istd = float(inv_std[ci])
            sg = 0.0
            sgx = 0.0
            for hi in range(h):
                for wi in range(w):
                    gv = float(g[bi, ci, hi, wi])
                    sg += gv
                    sgx += gv * (float(x[bi, ci, hi, wi]) - m) * istd
            dbeta[ci] += sg
            dgamma[ci] += sgx
    dx = np.empty_like(g)
    for bi in range(b):
        for ci in range(c):
            m = float(mean[ci])
            istd = float(inv_std[ci])
            sc = float(gamma[ci]) * istd
            if training:
                mg = dbeta[ci] / n
                mgx = dgamma[ci] / n
                for hi in range(h):
                    for wi in range(w):
                        xh = (float(x[bi, ci, hi, wi]) - m) * istd
                        dx[bi, ci, hi, wi] = sc * (float(g[bi, ci, hi, wi]) - mg - xh * mgx)
            else:
                for hi in range(h):
                    for wi in range(w):
                        dx[bi, ci, hi, wi] = sc * float(g[bi, ci, hi, wi])
    return dx, dgamma, dbeta


def bn_backward_nb(x, g, mean, inv_std, gamma, training):
    dx, dgamma, dbeta = _bn_backward_nb(x, g, mean, inv_std, gamma, training)
    return dx, dgamma.astype(x.dtype), dbeta.astype(x.dtype)


# ---------------------------------------------------------------------------
# 2x2 max pooling


def maxpool_forward_np(x):
    b, c, h, w = x.shape
    windows = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(windows, idx[..., None].astype(np.int64), axis=-1)[..., 0]
    return y, idx


@njit(cache=True)
def maxpool_forward_nb(x):
    b, c, h, w = x.shape
    hh, ww = h // 2, w // 2
    y = np.empty((b, c, hh, ww), dtype=x.dtype)
    idx = np.empty((b, c, hh, ww), dtype=np.int8)
    for bi in range(b):
        for ci in range(c):
            for i in range(hh):
                for j in range(ww):
                    v0 = x[bi, ci, 2 * i, 2 * j]
                    v1 = x[bi, ci, 2 * i, 2 * j + 1]
                    v2 = x[bi, ci, 2 * i + 1, 2 * j]
                    v3 = x[bi, ci, 2 * i + 1, 2 * j + 1]
                    best = v0
                    k = 0
                    if v1 > best:
                        best = v1
                        k = 1
                    if v2 > best:
                        best = v2
                        k = 2
                    if v3 > best:
                        best = v3
                        k = 3
                    y[bi, ci, i, j] = best
                    idx[bi, ci, i, j] = k
    return y, idx


def maxpool_backward_np(g, idx, height, width):
    b, c, hh, ww = g.shape
    dwin = np.zeros((b, c, hh, ww, 4), dtype=g.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.int64), g[..., None], axis=-1)
    return dwin.reshape(b, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, height, width)


@njit(cache=True)
def maxpool_backward_nb(g, idx, height, width):
    b, c, hh, ww = g.shape
    dx = np.zeros((b, c, height, width), dtype=g.dtype)
    for bi in range(b):
        for ci in range(c):
            for i in range(hh):
                for j in range(ww):
                    k = idx[bi, ci, i, j]
                    dx[bi, ci, 2 * i + k // 2, 2 * j + k % 2] = g[bi, ci, i, j]
    return dx


# ---------------------------------------------------------------------------
# stride-2 2x2 transposed convolution: block placement and its inverse


def deconv_place_np(ym, bias):
    """(B, H, W, C_out, 2, 2) blocks -> (B, C_out, 2H, 2W) plus bias."""
    b, h, w, c, _, _ = ym.shape
    out = ym.transpose(0, 3, 1, 4, 2, 5).reshape(b, c, 2 * h, 2 * w)
    return out + bias.reshape(1, -1, 1, 1)


@njit(cache=True)
def deconv_place_nb(ym, bias):
    b, h, w, c, _, _ = ym.shape
    out = np.empty((b, c, 2 * h, 2 * w), dtype=ym.dtype)
    for bi in range(b):
        for hi in range(h):
            for wi in range(w):
                for ci in range(c):
                    bv = bias[ci]
                    out[bi, ci, 2 * hi, 2 * wi] = ym[bi, hi, wi, ci, 0, 0] + bv
                    out[bi, ci, 2 * hi, 2 * wi + 1] = ym[bi, hi, wi, ci, 0, 1] + bv
                    out[bi, ci, 2 * hi + 1, 2 * wi] = ym[bi, hi, wi, ci, 1, 0] + bv
                    out[bi, ci, 2 * hi + 1, 2 * wi + 1] = ym[bi, hi, wi, ci, 1, 1] + bv
    return out


def deconv_gather_np(g):
    """(B, C_out, 2H, 2W) -> (B*H*W, C_out*4) block gradients."""
    b, c, h2, w2 = g.shape
    h, w = h2 // 2, w2 // 2
    g6 = g.reshape(b, c, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(g6).reshape(b * h * w, c * 4)


@njit(cache=True)
def deconv_gather_nb(g):
    b, c, h2, w2 = g.shape
    h, w = h2 // 2, w2 // 2
    out = np.empty((b * h * w, c * 4), dtype=g.dtype)
    row = 0
    for bi in range(b):
        for hi in range(h):
            for wi in range(w):
                for ci in range(c):
                    base = ci * 4
                    out[row, base] = g[bi, ci, 2 * hi, 2 * wi]
                    out[row, base + 1] = g[bi, ci, 2 * hi, 2 * wi + 1]
                    out[row, base + 2] = g[bi, ci, 2 * hi + 1, 2 * wi]
                    out[row, base + 3] = g[bi, ci, 2 * hi + 1, 2 * wi + 1]
                row += 1
    return out


def channels_last_np(x):
    """(B, C, H, W) -> (B*H*W, C) rows."""
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(b * h * w, c)


@njit(cache=True)
def channels_last_nb(x):
    b, c, h, w = x.shape
    out = np.empty((b * h * w, c), dtype=x.dtype)
    row = 0
    for bi in range(b):
        for hi in range(h):
            for wi in range(w):
                for ci in range(c):
                    out[row, ci] = x[bi, ci, hi, wi]
                row += 1
    return out


def channels_first_np(rows, b, h, w):
    """(B*H*W, C) rows -> (B, C, H, W)."""
    c = rows.shape[1]
    return np.ascontiguousarray(rows.reshape(b, h, w, c).transpose(0, 3, 1, 2))


@njit(cache=True)
def channels_first_nb(rows, b, h, w):
    c = rows.shape[1]
    out = np.empty((b, c, h, w), dtype=rows.dtype)
    row = 0
    for bi in range(b):
        for hi in range(h):
            for wi in range(w):
                for ci in range(c):
                    out[bi, ci, hi, wi] = rows[row, ci]
                row += 1
    return out


# ---------------------------------------------------------------------------
# single-output-channel 3x3 convolution backward (the prediction head)


def conv1_backward_np(xp, w, g):
    """dX and dW for a 3x3/pad-1 conv with one output channel.

    xp: padded input (B, C, H+2, W+2); w: (C, 3, 3) kernel slice;
    g: (B, H, W) output gradient. Returns (dx (B,C,H,W), dw (C,3,3)).
    """
    b, c, hp, wp = xp.shape
    h, w_ = hp - 2, wp - 2
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w_] += w[None, :, di, dj, None, None] * g[:, None]
            dw[:, di, dj] = np.einsum("bhw,bchw->c", g, xp[:, :, di : di + h, dj : dj + w_])
    return dxp[:, :, 1:-1, 1:-1], dw


@njit(cache=True)
def conv1_backward_nb(xp, w, g):
    b, c, hp, wp = xp.shape
    h, w_ = hp - 2, wp - 2
    gp = np.zeros((b, hp, wp), dtype=g.dtype)
    gp[:, 1 : 1 + h, 1 : 1 + w_] = g
    dx = np.empty((b, c, h, w_), dtype=xp.dtype)
    dw = np.zeros((c, 3, 3), dtype=np.float64)
    for bi in range(b):
        for ci in range(c):
            w00 = w[ci, 0, 0]
            w01 = w[ci, 0, 1]
            w02 = w[ci, 0, 2]
            w10 = w[ci, 1, 0]
            w11 = w[ci, 1, 1]
            w12 = w[ci, 1, 2]
            w20 = w[ci, 2, 0]
            w21 = w[ci, 2, 1]
            w22 = w[ci, 2, 2]
            for i in range(h):
                for j in range(w_):
                    # output (i + 1 - di, j + 1 - dj) reads input (i, j)
                    dx[bi, ci, i, j] = (
                        w00 * gp[bi, i + 2, j + 2]
                        + w01 * gp[bi, i + 2, j + 1]
                        + w02 * gp[bi, i + 2, j]
                        + w10 * gp[bi, i + 1, j + 2]
                        + w11 * gp[bi, i + 1, j + 1]
                        + w12 * gp[bi, i + 1, j]
                        + w20 * gp[bi, i, j + 2]
                        + w21 * gp[bi, i, j + 1]
                        + w22 * gp[bi, i, j]
                    )
            for di in range(3):
                for dj in range(3):
                    acc = 0.0
                    for i in range(h):
                        for j in range(w_):
                            acc += float(g[bi, i, j]) * float(xp[bi, ci, i + di, j + dj])
                    dw[ci, di, dj] += acc
    return dx, dw.astype(xp.dtype)


if HAVE_NUMBA:
    bn_stats = bn_stats_nb
    bn_backward = bn_backward_nb
    maxpool_forward = maxpool_forward_nb
    maxpool_backward = maxpool_backward_nb
    deconv_place = deconv_place_nb
    deconv_gather = deconv_gather_nb
    channels_last = channels_last_nb
    channels_first = channels_first_nb
    conv1_backward = conv1_backward_nb
else:  # pragma: no cover
    bn_stats = bn_stats_np
    bn_backward = bn_backward_np
    maxpool_forward = maxpool_forward_np
    maxpool_backward = maxpool_backward_np
    deconv_place = deconv_place_np
    deconv_gather = deconv_gather_np
    channels_last = channels_last_np
    channels_first = channels_first_np
    conv1_backward = conv1_backward_np
