"""Pure numpy warping kernels.

Reference implementation for any number of spatial dimensions. The compiled
module ``_cwarp`` provides the same three functions for 2D and 3D.

Layout: ``image`` is ``(B, C, *S)``, ``disp`` is ``(B, D, *S)`` with
``D == len(S)``; component ``d`` displaces along spatial axis ``d``.
Sample positions are clamped to ``[0, n - 1]`` on every axis.
"""

import itertools

import numpy as np


def _positions(disp):
    """Clamped sample coordinates plus a mask of which were inside the grid."""
    spatial = disp.shape[2:]
    grids = np.meshgrid(*[np.arange(n, dtype=disp.dtype) for n in spatial], indexing="ij")
    pos = np.empty_like(disp)
    inside = np.empty(disp.shape, dtype=bool)
    for d, n in enumerate(spatial):
        p = grids[d][None] + disp[:, d]
        inside[:, d] = (p >= 0) & (p <= n - 1)
        pos[:, d] = np.clip(p, 0, n - 1)
    return pos, inside


def _corners(pos, spatial):
    """Lower corner indices and fractional offsets per axis."""
    lo, frac = [], []
    for d, n in enumerate(spatial):
        if n == 1:
            i0 = np.zeros(pos[:, d].shape, dtype=np.intp)
        else:
            i0 = np.minimum(np.floor(pos[:, d]).astype(np.intp), n - 2)
        lo.append(i0)
        frac.append(pos[:, d] - i0)
    return lo, frac


def _flat_index(idx, spatial):
    flat = np.zeros_like(idx[0])
    for d, n in enumerate(spatial):
        flat = flat * n + idx[d]
    return flat


def _corner_table(lo, frac, spatial):
    """Yield (flat source index, weight, per-axis bit) for each of 2**D corners."""
    ndim = len(spatial)
    for bits in itertools.product((0, 1), repeat=ndim):
        idx = []
        w = np.ones_like(frac[0])
        for d, b in enumerate(bits):
            step = b if spatial[d] > 1 else 0
            idx.append(lo[d] + step)
            w = w * (frac[d] if b else 1.0 - frac[d])
        yield _flat_index(idx, spatial), w, bits


def linear_warp_forward(image, disp):
    B, C = image.shape[:2]
    spatial = image.shape[2:]
    pos, _ = _positions(disp)
    lo, frac = _corners(pos, spatial)
    src = image.reshape(B, C, -1)
    out = np.zeros_like(src)
    for flat, w, _ in _corner_table(lo, frac, spatial):
        flat = flat.reshape(B, 1, -1)
        out += w.reshape(B, 1, -1) * np.take_along_axis(src, np.broadcast_to(flat, out.shape), axis=2)
    return out.reshape(image.shape)


def linear_warp_backward(image, disp, grad_out):
    B, C = image.shape[:2]
    spatial = image.shape[2:]
    ndim = len(spatial)
    npix = int(np.prod(spatial))
    pos, inside = _positions(disp)
    lo, frac = _corners(pos, spatial)
    src = image.reshape(B, C, -1)
    g = grad_out.reshape(B, C, -1)

    grad_image = np.zeros(B * C * npix, dtype=image.dtype)
    grad_disp = np.zeros((B, ndim, npix), dtype=image.dtype)
    offsets = (np.arange(B * C) * npix).reshape(B, C, 1)
    frac_flat = [f.reshape(B, -1) for f in frac]

    for flat, w, bits in _corner_table(lo, frac, spatial):
        flat = flat.reshape(B, 1, -1)
        w = w.reshape(B, 1, -1)
        target = (offsets + flat).ravel()
        grad_image += np.bincount(target, weights=(w * g).ravel(), minlength=B * C * npix)

        vals = np.take_along_axis(src, np.broadcast_to(flat, g.shape), axis=2)
        gv = (g * vals).sum(axis=1)
        for d in range(ndim):
            if spatial[d] == 1:
                continue
            # derivative of the corner weight along axis d
            dw = np.ones_like(frac_flat[0])
            for e, b in enumerate(bits):
                if e == d:
                    dw = dw * (1.0 if b else -1.0)
                else:
                    dw = dw * (frac_flat[e] if b else 1.0 - frac_flat[e])
            grad_disp[:, d] += dw * gv

    grad_disp *= inside.reshape(B, ndim, -1)
    return grad_image.reshape(image.shape), grad_disp.reshape(disp.shape)


def nearest_warp(image, disp):
    B, C = image.shape[:2]
    spatial = image.shape[2:]
    pos, _ = _positions(disp)
    # round half away from zero; positions are nonnegative after clamping
    idx = [np.floor(pos[:, d] + 0.5).astype(np.intp) for d in range(len(spatial))]
    flat = _flat_index(idx, spatial).reshape(B, 1, -1)
    src = image.reshape(B, C, -1)
    out = np.take_along_axis(src, np.broadcast_to(flat, src.shape), axis=2)
    return out.reshape(image.shape)
