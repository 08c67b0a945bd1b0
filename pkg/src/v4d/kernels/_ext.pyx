# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled direct-convolution kernels (channels-first, float64, OpenMP).

Each function processes one temporal kernel tap: a plain 3D convolution
applied across a collection axis (batch x output frame), reading input
frames at ``t * st + toff``. The temporal loop over taps lives in the
Python wrapper. Row-major inner loops accumulate into thread-private
buffers, so results are bit-identical for any thread count.
"""

from cython.parallel cimport parallel, prange
from libc.stdlib cimport free, malloc


def conv3d_tap_fwd(const double[:, :, :, :, :, ::1] x,
                   const double[:, :, :, :, ::1] w,
                   double[:, :, :, :, :, ::1] out,
                   Py_ssize_t toff, Py_ssize_t st,
                   Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                   int nthreads):
    """out[n,co,t,od,oh,ow] += sum_{kd,kh,kw,ci} x[n,ci,t*st+toff,od*sd+kd,oh*sh+kh,ow*sw+kw] * w[kd,kh,kw,ci,co]"""
    cdef Py_ssize_t N = out.shape[0], Co = out.shape[1], T = out.shape[2]
    cdef Py_ssize_t Do = out.shape[3], Ho = out.shape[4], Wo = out.shape[5]
    cdef Py_ssize_t Ci = x.shape[1]
    cdef Py_ssize_t kD = w.shape[0], kH = w.shape[1], kW = w.shape[2]
    cdef Py_ssize_t ntask = N * T * Do
    cdef Py_ssize_t task, n, t, od, oh, ow, ci, co, kd, kh, kw, i
    cdef double s, s0, s1, s2
    cdef double *acc
    cdef const double *row
    cdef const double *wrow
    cdef bint fused3 = (kW == 3 and sw == 1)
    with nogil, parallel(num_threads=nthreads):
        acc = <double *> malloc(Co * Wo * sizeof(double))
        for task in prange(ntask, schedule="static"):
            n = task // (T * Do)
            t = (task // Do) % T
            od = task % Do
            for oh in range(Ho):
                for i in range(Co * Wo):
                    acc[i] = 0.0
                for kd in range(kD):
                    for kh in range(kH):
                        if fused3:
                            # all three width taps per pass: 3x the FLOPs
                            # per acc row load/store
                            for ci in range(Ci):
                                row = &x[n, ci, t * st + toff, od * sd + kd, oh * sh + kh, 0]
                                for co in range(Co):
                                    s0 = w[kd, kh, 0, ci, co]
                                    s1 = w[kd, kh, 1, ci, co]
                                    s2 = w[kd, kh, 2, ci, co]
                                    for ow in range(Wo):
                                        acc[co * Wo + ow] += (s0 * row[ow]
                                                              + s1 * row[ow + 1]
                                                              + s2 * row[ow + 2])
                        else:
                            for kw in range(kW):
                                for ci in range(Ci):
                                    row = &x[n, ci, t * st + toff, od * sd + kd, oh * sh + kh, kw]
                                    wrow = &w[kd, kh, kw, ci, 0]
                                    if sw == 1:
                                        for co in range(Co):
                                            s = wrow[co]
                                            for ow in range(Wo):
                                                acc[co * Wo + ow] += s * row[ow]
                                    else:
                                        for co in range(Co):
                                            s = wrow[co]
                                            for ow in range(Wo):
                                                acc[co * Wo + ow] += s * row[ow * sw]
                for co in range(Co):
                    for ow in range(Wo):
                        out[n, co, t, od, oh, ow] += acc[co * Wo + ow]
        free(acc)


def conv3d_tap_igrad(const double[:, :, :, :, :, ::1] dy,
                     const double[:, :, :, :, ::1] w,
                     double[:, :, :, :, :, ::1] dx,
                     Py_ssize_t toff, Py_ssize_t st,
                     Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                     int nthreads):
    """dx[n,ci,t*st+toff,od*sd+kd,oh*sh+kh,ow*sw+kw] += sum_co dy[n,co,t,od,oh,ow] * w[kd,kh,kw,ci,co]

    Parallelized over padded input rows: every (n, frame, id, ih) row of dx
    is written by exactly one thread, so accumulation is race-free and
    deterministic. Frames are visited per output index t (t*st+toff), which
    never collides within one tap.
    """
    cdef Py_ssize_t N = dy.shape[0], Co = dy.shape[1], T = dy.shape[2]
    cdef Py_ssize_t Do = dy.shape[3], Ho = dy.shape[4], Wo = dy.shape[5]
    cdef Py_ssize_t Ci = dx.shape[1], Dp = dx.shape[3], Hp = dx.shape[4], Wp = dx.shape[5]
    cdef Py_ssize_t kD = w.shape[0], kH = w.shape[1], kW = w.shape[2]
    cdef Py_ssize_t ntask = N * T * Dp
    cdef Py_ssize_t task, n, t, idx, ih, iw, od, oh, ow, ci, co, kd, kh, kw, i, rem
    cdef bint any_tap
    cdef double s
    cdef double *acc
    cdef const double *drow
    with nogil, parallel(num_threads=nthreads):
        acc = <double *> malloc(Ci * Wp * sizeof(double))
        for task in prange(ntask, schedule="static"):
            n = task // (T * Dp)
            t = (task // Dp) % T
            idx = task % Dp
            for ih in range(Hp):
                for i in range(Ci * Wp):
                    acc[i] = 0.0
                any_tap = 0
                for kd in range(kD):
                    rem = idx - kd
                    if rem < 0 or rem % sd != 0:
                        continue
                    od = rem // sd
                    if od >= Do:
                        continue
                    for kh in range(kH):
                        rem = ih - kh
                        if rem < 0 or rem % sh != 0:
                            continue
                        oh = rem // sh
                        if oh >= Ho:
                            continue
                        any_tap = 1
                        for co in range(Co):
                            drow = &dy[n, co, t, od, oh, 0]
                            for ci in range(Ci):
                                for kw in range(kW):
                                    s = w[kd, kh, kw, ci, co]
                                    if sw == 1:
                                        for ow in range(Wo):
                                            acc[ci * Wp + kw + ow] += s * drow[ow]
                                    else:
                                        for ow in range(Wo):
                                            acc[ci * Wp + kw + ow * sw] += s * drow[ow]
                if any_tap:
                    for ci in range(Ci):
                        for iw in range(Wp):
                            dx[n, ci, t * st + toff, idx, ih, iw] += acc[ci * Wp + iw]
        free(acc)


def conv3d_tap_wgrad(const double[:, :, :, :, :, ::1] x,
                     const double[:, :, :, :, :, ::1] dy,
                     double[:, :, :, :, ::1] dw,
                     Py_ssize_t toff, Py_ssize_t st,
                     Py_ssize_t sd, Py_ssize_t sh, Py_ssize_t sw,
                     int nthreads):
    """dw[kd,kh,kw,ci,co] += sum_{n,t,od,oh,ow} x[n,ci,t*st+toff,od*sd+kd,oh*sh+kh,ow*sw+kw] * dy[n,co,t,od,oh,ow]"""
    cdef Py_ssize_t N = dy.shape[0], Co = dy.shape[1], T = dy.shape[2]
    cdef Py_ssize_t Do = dy.shape[3], Ho = dy.shape[4], Wo = dy.shape[5]
    cdef Py_ssize_t Ci = x.shape[1]
    cdef Py_ssize_t kD = dw.shape[0], kH = dw.shape[1], kW = dw.shape[2]
    cdef bint fused3 = (kW == 3 and sw == 1)
    cdef Py_ssize_t ntask = kD * kH * Ci if fused3 else kD * kH * kW * Ci
    cdef Py_ssize_t task, n, t, od, oh, ow, ci, co, kd, kh, kw, i
    cdef double *acc
    cdef const double *row
    cdef const double *drow
    with nogil, parallel(num_threads=nthreads):
        acc = <double *> malloc(3 * Co * sizeof(double))
        for task in prange(ntask, schedule="static"):
            if fused3:
                kd = task // (kH * Ci)
                kh = (task // Ci) % kH
                ci = task % Ci
                for i in range(3 * Co):
                    acc[i] = 0.0
                for n in range(N):
                    for t in range(T):
                        for od in range(Do):
                            for oh in range(Ho):
                                row = &x[n, ci, t * st + toff, od * sd + kd, oh * sh + kh, 0]
                                for co in range(Co):
                                    drow = &dy[n, co, t, od, oh, 0]
                                    for ow in range(Wo):
                                        acc[3 * co] += row[ow] * drow[ow]
                                        acc[3 * co + 1] += row[ow + 1] * drow[ow]
                                        acc[3 * co + 2] += row[ow + 2] * drow[ow]
                for co in range(Co):
                    dw[kd, kh, 0, ci, co] += acc[3 * co]
                    dw[kd, kh, 1, ci, co] += acc[3 * co + 1]
                    dw[kd, kh, 2, ci, co] += acc[3 * co + 2]
            else:
                kd = task // (kH * kW * Ci)
                kh = (task // (kW * Ci)) % kH
                kw = (task // Ci) % kW
                ci = task % Ci
                for i in range(Co):
                    acc[i] = 0.0
                for n in range(N):
                    for t in range(T):
                        for od in range(Do):
                            for oh in range(Ho):
                                row = &x[n, ci, t * st + toff, od * sd + kd, oh * sh + kh, kw]
                                for co in range(Co):
                                    drow = &dy[n, co, t, od, oh, 0]
                                    if sw == 1:
                                        for ow in range(Wo):
                                            acc[co] += row[ow] * drow[ow]
                                    else:
                                        for ow in range(Wo):
                                            acc[co] += row[ow * sw] * drow[ow]
                for co in range(Co):
                    dw[kd, kh, kw, ci, co] += acc[co]
        free(acc)
