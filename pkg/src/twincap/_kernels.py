"""Convolution kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``TWINCAP_DISABLE_NUMBA`` is unset or ``0``.  Both paths are always
importable so tests and ``benchmarks/bench_kernels.py`` can compare them.

All kernels use "same" zero padding with odd kernel sizes and the
cross-correlation convention.  Compiled kernels are cached on disk by numba.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


def _env_disabled() -> bool:
    return os.environ.get("TWINCAP_DISABLE_NUMBA", "0") not in ("", "0")


USE_NUMBA = HAS_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# conv1d: x (B, Cin, L), w (Cout, Cin, K) -> (B, Cout, L)
#
# Both paths lower to im2col + one matmul; they differ in how the column
# matrix is gathered (strided views vs compiled loops) and scattered back.
# ---------------------------------------------------------------------------


def _im2col1d_numpy(x, k):
    p = (k - 1) // 2
    B, C, L = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = sliding_window_view(xp, k, axis=2)  # (B, C, L, K)
    return win.transpose(0, 2, 1, 3).reshape(B * L, C * k)


def _col2im1d_numpy(cols, shape, k):
    B, C, L = shape
    p = (k - 1) // 2
    c4 = cols.reshape(B, L, C, k)
    gxp = np.zeros((B, C, L + 2 * p), dtype=cols.dtype)
    for j in range(k):
        gxp[:, :, j:j + L] += c4[:, :, :, j].transpose(0, 2, 1)
    return gxp[:, :, p:p + L]


def conv1d_forward_numpy(x, w):
    B, _, L = x.shape
    Cout, Cin, k = w.shape
    out = _im2col1d_numpy(x, k) @ w.reshape(Cout, Cin * k).T  # (B*L, Cout)
    return np.ascontiguousarray(out.reshape(B, L, Cout).transpose(0, 2, 1))


def conv1d_backward_numpy(g, x, w):
    B, _, L = x.shape
    Cout, Cin, k = w.shape
    g2 = g.transpose(0, 2, 1).reshape(B * L, Cout)
    gw = (g2.T @ _im2col1d_numpy(x, k)).reshape(w.shape)
    gx = _col2im1d_numpy(g2 @ w.reshape(Cout, Cin * k), x.shape, k)
    return gx, gw


@njit(cache=True)
def _im2col1d_numba(x, k):
    B, C, L = x.shape
    p = (k - 1) // 2
    cols = np.zeros((B * L, C * k), dtype=x.dtype)
    for b in range(B):
        for t in range(L):
            r = b * L + t
            for c in range(C):
                for j in range(k):
                    s = t + j - p
                    if 0 <= s < L:
                        cols[r, c * k + j] = x[b, c, s]
    return cols


@njit(cache=True)
def _col2im1d_numba(cols, B, C, L, k):
    p = (k - 1) // 2
    gx = np.zeros((B, C, L), dtype=cols.dtype)
    for b in range(B):
        for t in range(L):
            r = b * L + t
            for c in range(C):
                for j in range(k):
                    s = t + j - p
                    if 0 <= s < L:
                        gx[b, c, s] += cols[r, c * k + j]
    return gx


@njit(cache=True)
def conv1d_forward_numba(x, w):
    B, Cin, L = x.shape
    Cout, _, k = w.shape
    w2 = np.ascontiguousarray(w.reshape(Cout, Cin * k).T)
    out = np.dot(_im2col1d_numba(x, k), w2)  # (B*L, Cout)
    res = np.empty((B, Cout, L), dtype=x.dtype)
    for b in range(B):
        for t in range(L):
            for o in range(Cout):
                res[b, o, t] = out[b * L + t, o]
    return res


@njit(cache=True)
def conv1d_backward_numba(g, x, w):
    B, Cin, L = x.shape
    Cout, _, k = w.shape
    g2 = np.empty((B * L, Cout), dtype=g.dtype)
    for b in range(B):
        for t in range(L):
            for o in range(Cout):
                g2[b * L + t, o] = g[b, o, t]
    cols = _im2col1d_numba(x, k)
    gw = np.dot(np.ascontiguousarray(g2.T), cols).reshape(Cout, Cin, k)
    w2 = np.ascontiguousarray(w.reshape(Cout, Cin * k))
    gx = _col2im1d_numba(np.dot(g2, w2), B, Cin, L, k)
    return gx, gw


# ---------------------------------------------------------------------------
# conv2d: x (B, Cin, H, W), w (Cout, Cin, KH, KW) -> (B, Cout, H, W)
# ---------------------------------------------------------------------------


def _im2col2d_numpy(x, kh, kw):
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, H, W, KH, KW)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * kh * kw)


def _col2im2d_numpy(cols, shape, kh, kw):
    B, C, H, W = shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    c6 = cols.reshape(B, H, W, C, kh, kw)
    gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + H, j:j + W] += c6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, ph:ph + H, pw:pw + W]


def conv2d_forward_numpy(x, w):
    B, _, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    out = _im2col2d_numpy(x, kh, kw) @ w.reshape(Cout, -1).T
    return np.ascontiguousarray(out.reshape(B, H, W, Cout).transpose(0, 3, 1, 2))


def conv2d_backward_numpy(g, x, w):
    B, _, H, W = x.shape
    Cout, Cin, kh, kw = w.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, Cout)
    gw = (g2.T @ _im2col2d_numpy(x, kh, kw)).reshape(w.shape)
    # "same" correlation is adjoint to correlation with the flipped kernel
    gx = conv2d_forward_numpy(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
    return gx, gw


# The fused view stack has few channels and a wide kernel, where direct
# loops beat a column matrix of Cin * KH * KW entries per pixel.


@njit(cache=True)
def conv2d_forward_numba(x, w):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    ph = (kh - 1) // 2
    pw = (kw - 1) // 2
    out = np.zeros((B, Cout, H, W), dtype=x.dtype)
    for b in range(B):
        for o in range(Cout):
            for c in range(Cin):
                for i in range(kh):
                    y0 = max(0, ph - i)
                    y1 = min(H, H + ph - i)
                    for j in range(kw):
                        z0 = max(0, pw - j)
                        z1 = min(W, W + pw - j)
                        wv = w[o, c, i, j]
                        for y in range(y0, y1):
                            sy = y + i - ph
                            for z in range(z0, z1):
                                out[b, o, y, z] += wv * x[b, c, sy, z + j - pw]
    return out


@njit(cache=True)
def conv2d_backward_numba(g, x, w):
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    ph = (kh - 1) // 2
    pw = (kw - 1) // 2
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for b in range(B):
        for o in range(Cout):
            for c in range(Cin):
                for i in range(kh):
                    y0 = max(0, ph - i)
                    y1 = min(H, H + ph - i)
                    for j in range(kw):
                        z0 = max(0, pw - j)
                        z1 = min(W, W + pw - j)
                        wv = w[o, c, i, j]
                        acc = 0.0
                        for y in range(y0, y1):
                            sy = y + i - ph
                            for z in range(z0, z1):
                                gv = g[b, o, y, z]
                                acc += gv * x[b, c, sy, z + j - pw]
                                gx[b, c, sy, z + j - pw] += wv * gv
                        gw[o, c, i, j] += acc
    return gx, gw


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def conv1d_forward(x, w):
    if USE_NUMBA:
        return conv1d_forward_numba(np.ascontiguousarray(x), np.ascontiguousarray(w))
    return conv1d_forward_numpy(x, w)


def conv1d_backward(g, x, w):
    if USE_NUMBA:
        return conv1d_backward_numba(
            np.ascontiguousarray(g), np.ascontiguousarray(x), np.ascontiguousarray(w)
        )
    return conv1d_backward_numpy(g, x, w)


def conv2d_forward(x, w):
    if USE_NUMBA:
        return conv2d_forward_numba(np.ascontiguousarray(x), np.ascontiguousarray(w))
    return conv2d_forward_numpy(x, w)


def conv2d_backward(g, x, w):
    if USE_NUMBA:
        return conv2d_backward_numba(
            np.ascontiguousarray(g), np.ascontiguousarray(x), np.ascontiguousarray(w)
        )
    return conv2d_backward_numpy(g, x, w)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
