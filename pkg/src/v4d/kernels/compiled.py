"""Wrapper around the Cython extension kernels.

Accumulates temporal kernel taps by calling the 3D tap kernels with a frame
offset into the full padded channels-first input; no copies are made beyond
the output/gradient allocations.
"""

from __future__ import annotations

import numpy as np

from . import _ext


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
    return (kt, co), (to, do, ho, wo)


def conv_fwd(xp, w, stride, nthreads):
    (kt, co), (to, do, ho, wo) = _geometry(xp.shape, w.shape, stride)
    st, sd, sh, sw = stride
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    out = np.zeros((xp.shape[0], co, to, do, ho, wo))
    for k in range(kt):
        _ext.conv3d_tap_fwd(xp, w[k], out, k, st, sd, sh, sw, nthreads)
    return out


def conv_igrad(dy, w, x_shape, pads, stride, nthreads):
    (kt, _co), _outs = _geometry(x_shape, w.shape, stride)
    dy = np.ascontiguousarray(dy)
    w = np.ascontiguousarray(w)
    if all(s == 1 for s in stride):
        # Stride-1 input gradient is itself a convolution: pad dy by
        # (k-1-before, k-1-after) per axis and convolve with the flipped
        # kernel, channels transposed. This reuses the fast forward kernel
        # and directly yields the unpadded input gradient.
        kshape = w.shape[:4]
        lohi = [(k - 1 - b, k - 1 - a) for k, (b, a) in zip(kshape, pads)]
        # a negative amount crops dy cells whose window lies in the pad region
        crop = tuple(
            slice(max(-lo, 0), dy.shape[i + 2] - max(-hi, 0))
            for i, (lo, hi) in enumerate(lohi)
        )
        dyp = np.pad(dy[(slice(None), slice(None)) + crop], [(0, 0), (0, 0)] + [
            (max(lo, 0), max(hi, 0)) for lo, hi in lohi
        ])
        wf = np.ascontiguousarray(
            np.transpose(w[::-1, ::-1, ::-1, ::-1], (0, 1, 2, 3, 5, 4))
        )
        return conv_fwd(dyp, wf, (1, 1, 1, 1), nthreads)
    st, sd, sh, sw = stride
    dxp = np.zeros(x_shape)
    for k in range(kt):
        _ext.conv3d_tap_igrad(dy, w[k], dxp, k, st, sd, sh, sw, nthreads)
    sl = [slice(None), slice(None)] + [
        slice(b, x_shape[i + 2] - a) for i, (b, a) in enumerate(pads)
    ]
    return np.ascontiguousarray(dxp[tuple(sl)])


def conv_wgrad(xp, dy, w_shape, stride, nthreads):
    (kt, _co), _outs = _geometry(xp.shape, w_shape, stride)
    st, sd, sh, sw = stride
    xp = np.ascontiguousarray(xp)
    dy = np.ascontiguousarray(dy)
    dw = np.zeros(w_shape)
    for k in range(kt):
        _ext.conv3d_tap_wgrad(xp, dy, dw[k], k, st, sd, sh, sw, nthreads)
    return dw
