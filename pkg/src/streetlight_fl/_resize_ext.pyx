# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear resampling kernel (half-pixel centres, edge clamping)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline double _clamp(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef void _axis(Py_ssize_t n_in, Py_ssize_t n_out, Py_ssize_t[:] lo,
                Py_ssize_t[:] hi, double[:] frac) noexcept nogil:
    cdef Py_ssize_t i
    cdef double s
    for i in range(n_out):
        s = ((<double>i + 0.5) * <double>n_in) / <double>n_out - 0.5
        s = _clamp(s, 0.0, <double>n_in - 1.0)
        lo[i] = <Py_ssize_t>floor(s)
        hi[i] = lo[i] + 1 if lo[i] + 1 < n_in else n_in - 1
        frac[i] = s - <double>lo[i]


def resize_bilinear(const double[:, :, ::1] src, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], nc = src.shape[2]
    cdef Py_ssize_t i, j, c
    cdef double a, b, cc, d, top, bot, v, lo, hi, fx, fy
    out = np.empty((out_h, out_w, nc), dtype=np.float64)
    cdef double[:, :, ::1] dst = out
    y0 = np.empty(out_h, dtype=np.intp)
    y1 = np.empty(out_h, dtype=np.intp)
    fys = np.empty(out_h, dtype=np.float64)
    x0 = np.empty(out_w, dtype=np.intp)
    x1 = np.empty(out_w, dtype=np.intp)
    fxs = np.empty(out_w, dtype=np.float64)
    cdef Py_ssize_t[:] y0v = y0, y1v = y1, x0v = x0, x1v = x1
    cdef double[:] fyv = fys, fxv = fxs
    with nogil:
        _axis(h, out_h, y0v, y1v, fyv)
        _axis(w, out_w, x0v, x1v, fxv)
        for i in range(out_h):
            fy = fyv[i]
            for j in range(out_w):
                fx = fxv[j]
                for c in range(nc):
                    a = src[y0v[i], x0v[j], c]
                    b = src[y0v[i], x1v[j], c]
                    cc = src[y1v[i], x0v[j], c]
                    d = src[y1v[i], x1v[j], c]
                    top = a + fx * (b - a)
                    bot = cc + fx * (d - cc)
                    v = top + fy * (bot - top)
                    lo = a if a < b else b
                    lo = lo if lo < cc else cc
                    lo = lo if lo < d else d
                    hi = a if a > b else b
                    hi = hi if hi > cc else cc
                    hi = hi if hi > d else d
                    dst[i, j, c] = _clamp(v, lo, hi)
    return out
