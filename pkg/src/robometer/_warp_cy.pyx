# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled bilinear warp kernel (hot path of neighbor generation).

Must stay bit-identical to _warp_numpy.warp_bilinear_kernel: float64
intermediates, same expression tree, compiled with -ffp-contract=off.
"""

import numpy as np

from libc.math cimport floor


def warp_bilinear_kernel(const float[:, :, ::1] image, const double[::1] inv):
    cdef Py_ssize_t h = image.shape[0]
    cdef Py_ssize_t w = image.shape[1]
    cdef Py_ssize_t nc = image.shape[2]
    out_arr = np.empty((h, w, nc), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef double a = inv[0], b = inv[1], c = inv[2]
    cdef double d = inv[3], e = inv[4], f = inv[5]
    cdef Py_ssize_t x, y, ch, x0, y0, x1, y1
    cdef double sx, sy, x0f, y0f, fx, fy
    cdef double v00, v01, v10, v11, top, bot, val
    cdef bint r0, r1, c0ok, c1ok

    for y in range(h):
        for x in range(w):
            sx = a * x + b * y + c
            sy = d * x + e * y + f
            x0f = floor(sx)
            y0f = floor(sy)
            fx = sx - x0f
            fy = sy - y0f
            x0 = <Py_ssize_t>x0f
            y0 = <Py_ssize_t>y0f
            x1 = x0 + 1
            y1 = y0 + 1
            r0 = 0 <= y0 < h
            r1 = 0 <= y1 < h
            c0ok = 0 <= x0 < w
            c1ok = 0 <= x1 < w
            for ch in range(nc):
                v00 = image[y0, x0, ch] if (r0 and c0ok) else 0.0
                v01 = image[y0, x1, ch] if (r0 and c1ok) else 0.0
                v10 = image[y1, x0, ch] if (r1 and c0ok) else 0.0
                v11 = image[y1, x1, ch] if (r1 and c1ok) else 0.0
                top = (1.0 - fx) * v00 + fx * v01
                bot = (1.0 - fx) * v10 + fx * v11
                val = (1.0 - fy) * top + fy * bot
                if val < 0.0:
                    val = 0.0
                elif val > 1.0:
                    val = 1.0
                out[y, x, ch] = <float>val
    return out_arr
