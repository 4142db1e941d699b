# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled multilinear / nearest warping kernels for 2D and 3D grids.

Same contract as ``_pywarp``: pull warp with border clamping, displacement in
voxels, component ``d`` moves along spatial axis ``d``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline void _axis(real p, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                       real* t, bint* inside) noexcept nogil:
    inside[0] = (p >= 0) and (p <= n - 1)
    if p < 0:
        p = 0
    elif p > n - 1:
        p = n - 1
    if n == 1:
        i0[0] = 0
        i1[0] = 0
        t[0] = 0
        return
    cdef Py_ssize_t lo = <Py_ssize_t>floor(p)
    if lo > n - 2:
        lo = n - 2
    i0[0] = lo
    i1[0] = lo + 1
    t[0] = p - lo


cdef inline Py_ssize_t _nearest(real p, Py_ssize_t n) noexcept nogil:
    if p < 0:
        p = 0
    elif p > n - 1:
        p = n - 1
    return <Py_ssize_t>floor(p + 0.5)


def _fwd2d(real[:, :, :, ::1] img, real[:, :, :, ::1] disp, real[:, :, :, ::1] out):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t b, c, i, j, y0, y1, x0, x1
    cdef real ty, tx
    cdef bint iny, inx
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    _axis(i + disp[b, 0, i, j], H, &y0, &y1, &ty, &iny)
                    _axis(j + disp[b, 1, i, j], W, &x0, &x1, &tx, &inx)
                    for c in range(C):
                        out[b, c, i, j] = (
                            (1 - ty) * ((1 - tx) * img[b, c, y0, x0] + tx * img[b, c, y0, x1])
                            + ty * ((1 - tx) * img[b, c, y1, x0] + tx * img[b, c, y1, x1])
                        )


def _bwd2d(real[:, :, :, ::1] img, real[:, :, :, ::1] disp, real[:, :, :, ::1] gout,
           real[:, :, :, ::1] gimg, real[:, :, :, ::1] gdisp):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t b, c, i, j, y0, y1, x0, x1
    cdef real ty, tx, g, v00, v01, v10, v11, dy, dx
    cdef bint iny, inx
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    _axis(i + disp[b, 0, i, j], H, &y0, &y1, &ty, &iny)
                    _axis(j + disp[b, 1, i, j], W, &x0, &x1, &tx, &inx)
                    dy = 0
                    dx = 0
                    for c in range(C):
                        g = gout[b, c, i, j]
                        v00 = img[b, c, y0, x0]
                        v01 = img[b, c, y0, x1]
                        v10 = img[b, c, y1, x0]
                        v11 = img[b, c, y1, x1]
                        gimg[b, c, y0, x0] += g * (1 - ty) * (1 - tx)
                        gimg[b, c, y0, x1] += g * (1 - ty) * tx
                        gimg[b, c, y1, x0] += g * ty * (1 - tx)
                        gimg[b, c, y1, x1] += g * ty * tx
                        if H > 1:
                            dy += g * ((1 - tx) * (v10 - v00) + tx * (v11 - v01))
                        if W > 1:
                            dx += g * ((1 - ty) * (v01 - v00) + ty * (v11 - v10))
                    gdisp[b, 0, i, j] = dy if iny else 0
                    gdisp[b, 1, i, j] = dx if inx else 0


def _near2d(real[:, :, :, ::1] img, real[:, :, :, ::1] disp, real[:, :, :, ::1] out):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t b, c, i, j, y, x
    with nogil:
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    y = _nearest(i + disp[b, 0, i, j], H)
                    x = _nearest(j + disp[b, 1, i, j], W)
                    for c in range(C):
                        out[b, c, i, j] = img[b, c, y, x]


def _fwd3d(real[:, :, :, :, ::1] img, real[:, :, :, :, ::1] disp, real[:, :, :, :, ::1] out):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1]
    cdef Py_ssize_t D = img.shape[2], H = img.shape[3], W = img.shape[4]
    cdef Py_ssize_t b, c, k, i, j, z0, z1, y0, y1, x0, x1
    cdef real tz, ty, tx, lo, hi
    cdef bint inz, iny, inx
    with nogil:
        for b in range(B):
            for k in range(D):
                for i in range(H):
                    for j in range(W):
                        _axis(k + disp[b, 0, k, i, j], D, &z0, &z1, &tz, &inz)
                        _axis(i + disp[b, 1, k, i, j], H, &y0, &y1, &ty, &iny)
                        _axis(j + disp[b, 2, k, i, j], W, &x0, &x1, &tx, &inx)
                        for c in range(C):
                            lo = ((1 - ty) * ((1 - tx) * img[b, c, z0, y0, x0] + tx * img[b, c, z0, y0, x1])
                                  + ty * ((1 - tx) * img[b, c, z0, y1, x0] + tx * img[b, c, z0, y1, x1]))
                            hi = ((1 - ty) * ((1 - tx) * img[b, c, z1, y0, x0] + tx * img[b, c, z1, y0, x1])
                                  + ty * ((1 - tx) * img[b, c, z1, y1, x0] + tx * img[b, c, z1, y1, x1]))
                            out[b, c, k, i, j] = (1 - tz) * lo + tz * hi


def _bwd3d(real[:, :, :, :, ::1] img, real[:, :, :, :, ::1] disp, real[:, :, :, :, ::1] gout,
           real[:, :, :, :, ::1] gimg, real[:, :, :, :, ::1] gdisp):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1]
    cdef Py_ssize_t D = img.shape[2], H = img.shape[3], W = img.shape[4]
    cdef Py_ssize_t b, c, k, i, j, z0, z1, y0, y1, x0, x1
    cdef real tz, ty, tx, g, dz, dy, dx
    cdef real v000, v001, v010, v011, v100, v101, v110, v111
    cdef bint inz, iny, inx
    with nogil:
        for b in range(B):
            for k in range(D):
                for i in range(H):
                    for j in range(W):
                        _axis(k + disp[b, 0, k, i, j], D, &z0, &z1, &tz, &inz)
                        _axis(i + disp[b, 1, k, i, j], H, &y0, &y1, &ty, &iny)
                        _axis(j + disp[b, 2, k, i, j], W, &x0, &x1, &tx, &inx)
                        dz = 0
                        dy = 0
                        dx = 0
                        for c in range(C):
                            g = gout[b, c, k, i, j]
                            v000 = img[b, c, z0, y0, x0]
                            v001 = img[b, c, z0, y0, x1]
                            v010 = img[b, c, z0, y1, x0]
                            v011 = img[b, c, z0, y1, x1]
                            v100 = img[b, c, z1, y0, x0]
                            v101 = img[b, c, z1, y0, x1]
                            v110 = img[b, c, z1, y1, x0]
                            v111 = img[b, c, z1, y1, x1]
                            gimg[b, c, z0, y0, x0] += g * (1 - tz) * (1 - ty) * (1 - tx)
                            gimg[b, c, z0, y0, x1] += g * (1 - tz) * (1 - ty) * tx
                            gimg[b, c, z0, y1, x0] += g * (1 - tz) * ty * (1 - tx)
                            gimg[b, c, z0, y1, x1] += g * (1 - tz) * ty * tx
                            gimg[b, c, z1, y0, x0] += g * tz * (1 - ty) * (1 - tx)
                            gimg[b, c, z1, y0, x1] += g * tz * (1 - ty) * tx
                            gimg[b, c, z1, y1, x0] += g * tz * ty * (1 - tx)
                            gimg[b, c, z1, y1, x1] += g * tz * ty * tx
                            if D > 1:
                                dz += g * ((1 - ty) * ((1 - tx) * (v100 - v000) + tx * (v101 - v001))
                                           + ty * ((1 - tx) * (v110 - v010) + tx * (v111 - v011)))
                            if H > 1:
                                dy += g * ((1 - tz) * ((1 - tx) * (v010 - v000) + tx * (v011 - v001))
                                           + tz * ((1 - tx) * (v110 - v100) + tx * (v111 - v101)))
                            if W > 1:
                                dx += g * ((1 - tz) * ((1 - ty) * (v001 - v000) + ty * (v011 - v010))
                                           + tz * ((1 - ty) * (v101 - v100) + ty * (v111 - v110)))
                        gdisp[b, 0, k, i, j] = dz if inz else 0
                        gdisp[b, 1, k, i, j] = dy if iny else 0
                        gdisp[b, 2, k, i, j] = dx if inx else 0


def _near3d(real[:, :, :, :, ::1] img, real[:, :, :, :, ::1] disp, real[:, :, :, :, ::1] out):
    cdef Py_ssize_t B = img.shape[0], C = img.shape[1]
    cdef Py_ssize_t D = img.shape[2], H = img.shape[3], W = img.shape[4]
    cdef Py_ssize_t b, c, k, i, j, z, y, x
    with nogil:
        for b in range(B):
            for k in range(D):
                for i in range(H):
                    for j in range(W):
                        z = _nearest(k + disp[b, 0, k, i, j], D)
                        y = _nearest(i + disp[b, 1, k, i, j], H)
                        x = _nearest(j + disp[b, 2, k, i, j], W)
                        for c in range(C):
                            out[b, c, k, i, j] = img[b, c, z, y, x]


def linear_warp_forward(image, disp):
    out = np.empty_like(image)
    (_fwd2d if image.ndim == 4 else _fwd3d)(image, disp, out)
    return out


def linear_warp_backward(image, disp, grad_out):
    gimg = np.zeros_like(image)
    gdisp = np.empty_like(disp)
    (_bwd2d if image.ndim == 4 else _bwd3d)(image, disp, grad_out, gimg, gdisp)
    return gimg, gdisp


def nearest_warp(image, disp):
    out = np.empty_like(image)
    (_near2d if image.ndim == 4 else _near3d)(image, disp, out)
    return out
