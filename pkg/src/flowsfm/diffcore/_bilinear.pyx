# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled bilinear gather/scatter.

Mirrors the numpy fallback in kernels.py exactly: same border clamping,
same corner-weight expressions, and scatter accumulates corner by corner
in element order so repeated targets sum in the same order as np.add.at.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _clampi(Py_ssize_t v, Py_ssize_t lo, Py_ssize_t hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef inline double _clampd(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def bilinear_gather(cnp.ndarray[cnp.float64_t, ndim=3] src,
                    cnp.ndarray[cnp.float64_t, ndim=2] x,
                    cnp.ndarray[cnp.float64_t, ndim=2] y):
    cdef Py_ssize_t b = src.shape[0]
    cdef Py_ssize_t h = src.shape[1]
    cdef Py_ssize_t w = src.shape[2]
    cdef Py_ssize_t n = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((b, n), dtype=np.float64)
    cdef Py_ssize_t i, j, x0, y0, x1, y1
    cdef double xc, yc, fx, fy, v00, v01, v10, v11
    with nogil:
        for i in range(b):
            for j in range(n):
                xc = _clampd(x[i, j], 0.0, w - 1.0)
                yc = _clampd(y[i, j], 0.0, h - 1.0)
                x0 = _clampi(<Py_ssize_t>xc, 0, w - 2 if w > 1 else 0)
                y0 = _clampi(<Py_ssize_t>yc, 0, h - 2 if h > 1 else 0)
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                fx = xc - x0
                fy = yc - y0
                v00 = src[i, y0, x0]
                v01 = src[i, y0, x1]
                v10 = src[i, y1, x0]
                v11 = src[i, y1, x1]
                out[i, j] = ((v00 * ((1.0 - fy) * (1.0 - fx))
                              + v01 * ((1.0 - fy) * fx))
                             + v10 * (fy * (1.0 - fx))) \
                            + v11 * (fy * fx)
    return out


def bilinear_scatter(cnp.ndarray[cnp.float64_t, ndim=2] gout,
                     cnp.ndarray[cnp.float64_t, ndim=2] x,
                     cnp.ndarray[cnp.float64_t, ndim=2] y,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t b = gout.shape[0]
    cdef Py_ssize_t n = gout.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.zeros((b, h, w), dtype=np.float64)
    cdef Py_ssize_t i, j, x0, y0, x1, y1, corner
    cdef double xc, yc, fx, fy, g
    # Corner-major accumulation keeps float summation order identical to
    # the four sequential np.add.at calls in the fallback.
    with nogil:
        for corner in range(4):
            for i in range(b):
                for j in range(n):
                    xc = _clampd(x[i, j], 0.0, w - 1.0)
                    yc = _clampd(y[i, j], 0.0, h - 1.0)
                    x0 = _clampi(<Py_ssize_t>xc, 0, w - 2 if w > 1 else 0)
                    y0 = _clampi(<Py_ssize_t>yc, 0, h - 2 if h > 1 else 0)
                    x1 = x0 + 1 if x0 + 1 < w else w - 1
                    y1 = y0 + 1 if y0 + 1 < h else h - 1
                    fx = xc - x0
                    fy = yc - y0
                    g = gout[i, j]
                    if corner == 0:
                        out[i, y0, x0] += g * ((1.0 - fy) * (1.0 - fx))
                    elif corner == 1:
                        out[i, y0, x1] += g * ((1.0 - fy) * fx)
                    elif corner == 2:
                        out[i, y1, x0] += g * (fy * (1.0 - fx))
                    else:
                        out[i, y1, x1] += g * (fy * fx)
    return out
