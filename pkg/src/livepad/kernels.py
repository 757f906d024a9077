"""Convolution kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``LIVEPAD_NUMBA=0`` to force
the numpy path (useful for debugging or where numba is unavailable). Both
paths compute the same cross-correlation; each is deterministic on its own,
but they are not bitwise identical to each other.
"""

import os

import numpy as np

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

_FLAG = os.environ.get("LIVEPAD_NUMBA", "1").strip().lower()
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("0", "false", "no", "off")


def backend():
    return "numba" if USE_NUMBA else "numpy"


def output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# ---------------------------------------------------------------------------
# numpy (im2col) path


def _windows(xp, k, stride, ho, wo):
    # (B, C, Ho, Wo, k, k) strided view, no copy
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d_forward_numpy(x, w, stride, pad):
    b, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = output_size(h, k, stride, pad), output_size(wd, k, stride, pad)
    win = _windows(_pad(x, pad), k, stride, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward_numpy(x, w, dout, stride, pad, need_dx=True):
    b, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    xp = _pad(x, pad)
    win = _windows(xp, k, stride, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    dflat = dout.transpose(0, 2, 3, 1).reshape(b * ho * wo, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw

    dcols = (dflat @ w.reshape(f, -1)).reshape(b, ho, wo, c, k, k)
    dxp = np.zeros_like(xp)
    hi, wi = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + hi : stride, j : j + wi : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw


# ---------------------------------------------------------------------------
# numba path (direct loops over channel-last arrays; the innermost loop runs
# over a contiguous channel axis so it vectorizes)


def _conv_fwd_loops(xp, wt, stride, ho, wo):
    # xp: (B, Hp, Wp, C) padded input; wt: (k, k, C, F)
    b, c = xp.shape[0], xp.shape[3]
    k, f = wt.shape[0], wt.shape[3]
    out = np.zeros((b, ho, wo, f))
    for n in range(b):
        for y in range(ho):
            for xx in range(wo):
                acc = out[n, y, xx]
                for i in range(k):
                    for j in range(k):
                        px = xp[n, y * stride + i, xx * stride + j]
                        wij = wt[i, j]
                        for ci in range(c):
                            v = px[ci]
                            wr = wij[ci]
                            for o in range(f):
                                acc[o] += v * wr[o]
    return out


def _conv_bwd_loops(xp, wt, dout, stride, need_dx):
    # dout: (B, Ho, Wo, F); returns dxp (B, Hp, Wp, C) and dwt (k, k, C, F)
    b, c = xp.shape[0], xp.shape[3]
    k, f = wt.shape[0], wt.shape[3]
    ho, wo = dout.shape[1], dout.shape[2]
    dwt = np.zeros_like(wt)
    dxp = np.zeros_like(xp) if need_dx else np.zeros((1, 1, 1, 1))
    wf = np.ascontiguousarray(wt.transpose(0, 1, 3, 2))  # (k, k, F, C)
    for n in range(b):
        for y in range(ho):
            for xx in range(wo):
                g = dout[n, y, xx]
                for i in range(k):
                    for j in range(k):
                        row, col = y * stride + i, xx * stride + j
                        px = xp[n, row, col]
                        dw = dwt[i, j]
                        for ci in range(c):
                            v = px[ci]
                            dr = dw[ci]
                            for o in range(f):
                                dr[o] += v * g[o]
                        if need_dx:
                            dx = dxp[n, row, col]
                            wr = wf[i, j]
                            for o in range(f):
                                go = g[o]
                                wo_ = wr[o]
                                for ci in range(c):
                                    dx[ci] += go * wo_[ci]
    return dxp, dwt


if NUMBA_AVAILABLE:
    _conv_fwd_jit = numba.njit(cache=True, fastmath=False)(_conv_fwd_loops)
    _conv_bwd_jit = numba.njit(cache=True, fastmath=False)(_conv_bwd_loops)
else:  # pragma: no cover
    _conv_fwd_jit = _conv_bwd_jit = None


def _nhwc_padded(x, pad):
    x = x.transpose(0, 2, 3, 1)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    return np.ascontiguousarray(x)


def conv2d_forward_numba(x, w, stride, pad):
    k = w.shape[2]
    ho = output_size(x.shape[2], k, stride, pad)
    wo = output_size(x.shape[3], k, stride, pad)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    out = _conv_fwd_jit(_nhwc_padded(x, pad), wt, stride, ho, wo)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_numba(x, w, dout, stride, pad, need_dx=True):
    d = np.ascontiguousarray(dout.transpose(0, 2, 3, 1))
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    dxp, dwt = _conv_bwd_jit(_nhwc_padded(x, pad), wt, d, stride, need_dx)
    dw = np.ascontiguousarray(dwt.transpose(3, 2, 0, 1))
    if not need_dx:
        return None, dw
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)), dw


if USE_NUMBA:
    conv2d_forward = conv2d_forward_numba
    conv2d_backward = conv2d_backward_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward = conv2d_backward_numpy
