"""Hot loops for convolution and pooling on NHWC arrays.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. ``GOCARD_NUMBA=0`` in the environment (or a missing numba) selects
the numpy path at import time; ``use_numba()`` switches at runtime, which the
benchmark and the equivalence tests rely on.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_flag = os.environ.get("GOCARD_NUMBA", "1").strip().lower()
_USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def numba_enabled():
    return _USE_NUMBA


def use_numba(enabled):
    """Select the kernel backend; returns the previous setting."""
    global _USE_NUMBA
    prev = _USE_NUMBA
    _USE_NUMBA = bool(enabled) and HAVE_NUMBA
    return prev


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _im2col_np(x, f, s, ho, wo):
    win = sliding_window_view(x, (f, f), axis=(1, 2))  # (N, H', W', C, f, f)
    win = win[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    n, c = x.shape[0], x.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, f * f * c)


def _col2im_np(cols, shape, f, s, ho, wo):
    n, h, w, c = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, f, f, c)
    for i in range(f):
        for j in range(f):
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += cols[:, :, :, i, j, :]
    return out


def _maxpool_np(x, f, s, ho, wo):
    win = sliding_window_view(x, (f, f), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    n, c = x.shape[0], x.shape[3]
    flat = win.reshape(n, ho, wo, c, f * f)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def _maxpool_back_np(grad, arg, shape, f, s):
    out = np.zeros(shape, dtype=grad.dtype)
    ho, wo = grad.shape[1], grad.shape[2]
    for i in range(f):
        for j in range(f):
            hit = arg == i * f + j
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += np.where(hit, grad, 0)
    return out


def _avgpool_np(x, f, s, ho, wo):
    win = sliding_window_view(x, (f, f), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    return np.ascontiguousarray(win.mean(axis=(-2, -1)))


def _avgpool_back_np(grad, shape, f, s):
    out = np.zeros(shape, dtype=grad.dtype)
    ho, wo = grad.shape[1], grad.shape[2]
    g = grad / (f * f)
    for i in range(f):
        for j in range(f):
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += g
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, f, s, ho, wo):
        n, h, w, c = x.shape
        # each patch row (j, c) is contiguous in a (N, H, W*C) view
        xr = x.reshape(n, h, w * c)
        run = f * c
        cols = np.empty((n * ho * wo, f * run), dtype=x.dtype)
        r = 0
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    base = ox * s * c
                    for i in range(f):
                        src = xr[b, oy * s + i]
                        k = i * run
                        for t in range(run):
                            cols[r, k + t] = src[base + t]
                    r += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, h, w, c, f, s, ho, wo):
        out = np.zeros((n, h, w, c), dtype=cols.dtype)
        r = 0
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    k = 0
                    for i in range(f):
                        for j in range(f):
                            for ch in range(c):
                                out[b, oy * s + i, ox * s + j, ch] += cols[r, k]
                                k += 1
                    r += 1
        return out

    @njit(cache=True)
    def _maxpool_nb(x, f, s, ho, wo):
        n, _, _, c = x.shape
        out = np.empty((n, ho, wo, c), dtype=x.dtype)
        arg = np.empty((n, ho, wo, c), dtype=np.int64)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        best = x[b, oy * s, ox * s, ch]
                        bi = 0
                        for i in range(f):
                            for j in range(f):
                                v = x[b, oy * s + i, ox * s + j, ch]
                                if v > best:
                                    best = v
                                    bi = i * f + j
                        out[b, oy, ox, ch] = best
                        arg[b, oy, ox, ch] = bi
        return out, arg

    @njit(cache=True)
    def _maxpool_back_nb(grad, arg, n, h, w, c, f, s):
        out = np.zeros((n, h, w, c), dtype=grad.dtype)
        _, ho, wo, _ = grad.shape
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        a = arg[b, oy, ox, ch]
                        out[b, oy * s + a // f, ox * s + a % f, ch] += grad[b, oy, ox, ch]
        return out

    @njit(cache=True)
    def _avgpool_nb(x, f, s, ho, wo):
        n, _, _, c = x.shape
        out = np.zeros((n, ho, wo, c), dtype=x.dtype)
        inv = 1.0 / (f * f)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for i in range(f):
                        for j in range(f):
                            for ch in range(c):
                                out[b, oy, ox, ch] += x[b, oy * s + i, ox * s + j, ch]
                    for ch in range(c):
                        out[b, oy, ox, ch] *= inv
        return out

    @njit(cache=True)
    def _avgpool_back_nb(grad, n, h, w, c, f, s):
        out = np.zeros((n, h, w, c), dtype=grad.dtype)
        _, ho, wo, _ = grad.shape
        g = grad / (f * f)
        # one strided accumulation pass per window offset, like the numpy path
        if s == 1:
            # stride 1: each output row lands on one contiguous (W*C) run
            outr = out.reshape(n, h, w * c)
            gr = g.reshape(n, ho, wo * c)
            run = wo * c
            for i in range(f):
                for j in range(f):
                    for b in range(n):
                        for oy in range(ho):
                            for t in range(run):
                                outr[b, oy + i, j * c + t] += gr[b, oy, t]
            return out
        for i in range(f):
            for j in range(f):
                for b in range(n):
                    for oy in range(ho):
                        for ox in range(wo):
                            for ch in range(c):
                                out[b, oy * s + i, ox * s + j, ch] += g[b, oy, ox, ch]
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def out_size(n, f, s, p):
    """Sliding-window output length along one axis."""
    return (n + 2 * p - f) // s + 1


def im2col(x, f, s):
    """(N, H, W, C) padded input -> (N*Ho*Wo, f*f*C) patch matrix, (i, j, c) order."""
    ho, wo = out_size(x.shape[1], f, s, 0), out_size(x.shape[2], f, s, 0)
    if _USE_NUMBA:
        return _im2col_nb(np.ascontiguousarray(x), f, s, ho, wo)
    return _im2col_np(x, f, s, ho, wo)


def col2im(cols, shape, f, s):
    """Adjoint of im2col: scatter-add patch rows back onto an array of ``shape``."""
    n, h, w, c = shape
    ho, wo = out_size(h, f, s, 0), out_size(w, f, s, 0)
    if _USE_NUMBA:
        return _col2im_nb(np.ascontiguousarray(cols), n, h, w, c, f, s, ho, wo)
    return _col2im_np(cols, shape, f, s, ho, wo)


def maxpool(x, f, s):
    ho, wo = out_size(x.shape[1], f, s, 0), out_size(x.shape[2], f, s, 0)
    if _USE_NUMBA:
        return _maxpool_nb(np.ascontiguousarray(x), f, s, ho, wo)
    return _maxpool_np(x, f, s, ho, wo)


def maxpool_backward(grad, arg, shape, f, s):
    if _USE_NUMBA:
        n, h, w, c = shape
        return _maxpool_back_nb(np.ascontiguousarray(grad), arg, n, h, w, c, f, s)
    return _maxpool_back_np(grad, arg, shape, f, s)


def avgpool(x, f, s):
    ho, wo = out_size(x.shape[1], f, s, 0), out_size(x.shape[2], f, s, 0)
    if _USE_NUMBA:
        return _avgpool_nb(np.ascontiguousarray(x), f, s, ho, wo)
    return _avgpool_np(x, f, s, ho, wo)


def avgpool_backward(grad, shape, f, s):
    if _USE_NUMBA:
        n, h, w, c = shape
        return _avgpool_back_nb(np.ascontiguousarray(grad), n, h, w, c, f, s)
    return _avgpool_back_np(grad, shape, f, s)
