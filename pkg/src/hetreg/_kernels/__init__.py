"""Warping kernels with a compiled fast path.

The Cython module ``_cwarp`` handles 2D and 3D grids; everything else (1D,
or a missing build) goes through the numpy reference in ``_pywarp``. Set
``HETREG_KERNEL=python`` to force the numpy path.
"""

import os

import numpy as np

from . import _pywarp

try:
    if os.environ.get("HETREG_KERNEL", "").lower() == "python":
        raise ImportError("compiled kernels disabled by HETREG_KERNEL")
    from . import _cwarp
except ImportError:
    _cwarp = None

BACKEND = "cython" if _cwarp is not None else "python"

__all__ = ["BACKEND", "get_backend", "linear_warp_forward", "linear_warp_backward", "nearest_warp"]


def get_backend(name=None):
    """Return the kernel module called ``name`` (defaults to the active one)."""
    name = name or BACKEND
    if name == "python":
        return _pywarp
    if name == "cython":
        if _cwarp is None:
            raise ImportError("compiled warp kernels are not built")
        return _cwarp
    raise ValueError(f"unknown kernel backend {name!r}")


def _pick(image, backend):
    if backend is not None:
        mod = get_backend(backend)
    else:
        mod = _cwarp if _cwarp is not None else _pywarp
    if mod is not _pywarp and (image.ndim not in (4, 5) or image.dtype not in (np.float32, np.float64)):
        mod = _pywarp
    return mod


def _prep(*arrays):
    dtype = np.result_type(*arrays)
    if dtype not in (np.float32, np.float64):
        dtype = np.float64
    return [np.ascontiguousarray(a, dtype=dtype) for a in arrays]


def linear_warp_forward(image, disp, backend=None):
    image, disp = _prep(image, disp)
    return _pick(image, backend).linear_warp_forward(image, disp)


def linear_warp_backward(image, disp, grad_out, backend=None):
    image, disp, grad_out = _prep(image, disp, grad_out)
    return _pick(image, backend).linear_warp_backward(image, disp, grad_out)


def nearest_warp(image, disp, backend=None):
    image, disp = _prep(image, disp)
    return _pick(image, backend).nearest_warp(image, disp)
