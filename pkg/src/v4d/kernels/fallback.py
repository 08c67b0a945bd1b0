"""Pure-numpy convolution backend.

Works in the channels-last layout internally (one transpose per call) so the
per-tap contractions map onto BLAS via ``np.tensordot`` on strided window
views. Temporal taps accumulate 3D convolutions of time-shifted views,
mirroring the compiled backend exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# im2col buffers are chunked over the batch axis to stay below this size
_MAX_BUFFER_BYTES = 128 * 1024 * 1024


def _geometry(x_shape, w_shape, stride):
    n, ci, tp, dp, hp, wp = x_shape
    kt, kd, kh, kw, ci2, co = w_shape
    if ci != ci2:
        raise ValueError(f"channel mismatch: input {ci}, kernel {ci2}")
    st, sd, sh, sw = stride
    to = (tp - kt) // st + 1
    do = (dp - kd) // sd + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    return (n, ci, tp, dp, hp, wp), (kt, kd, kh, kw, co), (to, do, ho, wo)


def _batch_chunks(n, per_item_bytes):
    step = max(1, int(_MAX_BUFFER_BYTES // max(1, per_item_bytes)))
    for lo in range(0, n, step):
        yield lo, min(n, lo + step)


def conv_fwd(xp, w, stride, _nthreads=1):
    (n, ci, tp, dp, hp, wp), (kt, kd, kh, kw, co), (to, do, ho, wo) = _geometry(
        xp.shape, w.shape, stride
    )
    st, sd, sh, sw = stride
    xcl = np.moveaxis(xp, 1, 5)  # (N,Tp,Dp,Hp,Wp,Ci) view
    y = np.zeros((n, to, do, ho, wo, co))
    per_item = to * do * ho * wo * kd * kh * kw * ci * 8
    for lo, hi in _batch_chunks(n, per_item):
        win = sliding_window_view(xcl[lo:hi], (kd, kh, kw), axis=(2, 3, 4))
        win = win[:, :, ::sd, ::sh, ::sw]  # (B,Tp,Do,Ho,Wo,Ci,kd,kh,kw)
        for k in range(kt):
            v = win[:, k : k + (to - 1) * st + 1 : st]
            y[lo:hi] += np.tensordot(v, w[k], axes=([6, 7, 8, 5], [0, 1, 2, 3]))
    return np.ascontiguousarray(np.moveaxis(y, 5, 1))


def conv_igrad(dy, w, x_shape, pads, stride, _nthreads=1):
    (n, ci, tp, dp, hp, wp), (kt, kd, kh, kw, co), (to, do, ho, wo) = _geometry(
        x_shape, w.shape, stride
    )
    st, sd, sh, sw = stride
    dycl = np.moveaxis(dy, 1, 5)  # (N,To,Do,Ho,Wo,Co) view
    dxcl = np.zeros((n, tp, dp, hp, wp, ci))
    for k in range(kt):
        tsl = slice(k, k + (to - 1) * st + 1, st)
        for a in range(kd):
            dsl = slice(a, a + (do - 1) * sd + 1, sd)
            for b in range(kh):
                hsl = slice(b, b + (ho - 1) * sh + 1, sh)
                for c in range(kw):
                    wsl = slice(c, c + (wo - 1) * sw + 1, sw)
                    g = np.tensordot(dycl, w[k, a, b, c], axes=([5], [1]))
                    dxcl[:, tsl, dsl, hsl, wsl] += g
    sl = [slice(None)] + [
        slice(b, dxcl.shape[i + 1] - a) for i, (b, a) in enumerate(pads)
    ] + [slice(None)]
    return np.ascontiguousarray(np.moveaxis(dxcl[tuple(sl)], 5, 1))


def conv_wgrad(xp, dy, w_shape, stride, _nthreads=1):
    (n, ci, tp, dp, hp, wp), (kt, kd, kh, kw, co), (to, do, ho, wo) = _geometry(
        xp.shape, w_shape, stride
    )
    st, sd, sh, sw = stride
    xcl = np.moveaxis(xp, 1, 5)
    dycl = np.moveaxis(dy, 1, 5)
    dw = np.zeros(w_shape)
    per_item = to * do * ho * wo * kd * kh * kw * ci * 8
    for lo, hi in _batch_chunks(n, per_item):
        win = sliding_window_view(xcl[lo:hi], (kd, kh, kw), axis=(2, 3, 4))
        win = win[:, :, ::sd, ::sh, ::sw]
        for k in range(kt):
            v = win[:, k : k + (to - 1) * st + 1 : st]
            g = np.tensordot(v, dycl[lo:hi], axes=([0, 1, 2, 3, 4], [0, 1, 2, 3, 4]))
            dw[k] += np.transpose(g, (1, 2, 3, 0, 4))  # (Ci,kd,kh,kw,Co)->(kd,kh,kw,Ci,Co)
    return dw
