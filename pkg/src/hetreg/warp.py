"""Spatial warping of images and label maps by dense displacement fields.

Conventions used throughout the package:

* images are ``(B, C, *S)`` and displacements ``(B, D, *S)`` with
  ``D == len(S)``; component ``d`` is the displacement along array axis ``d``;
* displacements are in pixels/voxels;
* warping pulls: ``out(x) = image(x + z(x))``, with sample positions clamped
  to the grid (border replication).

Functions accept either torch tensors or numpy arrays and return the same
kind they were given.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import _kernels


class ShapeError(ValueError):
    """Raised when image and displacement grids disagree."""


@dataclass
class ImagePair:
    """A moving/fixed pair on a shared grid, unbatched (``*S``)."""

    moving: np.ndarray
    fixed: np.ndarray
    moving_mask: Optional[np.ndarray] = None
    fixed_mask: Optional[np.ndarray] = None
    gt_displacement: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.moving.shape != self.fixed.shape:
            raise ShapeError(f"moving {self.moving.shape} and fixed {self.fixed.shape} differ")
        if self.ndim not in (2, 3):
            raise ShapeError(f"expected a 2D or 3D pair, got {self.ndim}D")
        for name in ("moving_mask", "fixed_mask"):
            mask = getattr(self, name)
            if mask is None:
                continue
            if mask.shape != self.moving.shape:
                raise ShapeError(f"{name} shape {mask.shape} != image shape {self.moving.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"{name} must be {{0,1}}-valued")
        if self.gt_displacement is not None:
            DisplacementField(self.gt_displacement).check(self.shape)

    @property
    def shape(self):
        return self.moving.shape

    @property
    def ndim(self):
        return self.moving.ndim


@dataclass
class DisplacementField:
    """Per-pixel displacement vectors, shape ``(D, *S)``, in pixels."""

    vectors: np.ndarray

    def check(self, spatial_shape=None):
        v = self.vectors
        if v.shape[0] != v.ndim - 1:
            raise ShapeError(f"displacement has {v.shape[0]} components for {v.ndim - 1} spatial dims")
        if spatial_shape is not None and tuple(v.shape[1:]) != tuple(spatial_shape):
            raise ShapeError(f"displacement grid {v.shape[1:]} != image grid {tuple(spatial_shape)}")
        if not np.isfinite(v).all():
            raise ValueError("displacement contains non-finite values")
        return self

    @property
    def ndim(self):
        return self.vectors.shape[0]


def _check_shapes(image, disp):
    if image.dim() < 3 or disp.dim() != image.dim():
        raise ShapeError(f"expected (B, C, *S) image and (B, D, *S) displacement, got {tuple(image.shape)} and {tuple(disp.shape)}")
    if image.shape[0] != disp.shape[0] or image.shape[2:] != disp.shape[2:]:
        raise ShapeError(f"image {tuple(image.shape)} and displacement {tuple(disp.shape)} grids differ")
    if disp.shape[1] != disp.dim() - 2:
        raise ShapeError(f"displacement has {disp.shape[1]} components for {disp.dim() - 2} spatial dims")


class _LinearWarp(torch.autograd.Function):

    @staticmethod
    def forward(ctx, image, disp):
        img_np = image.detach().cpu().numpy()
        disp_np = disp.detach().cpu().numpy()
        out = _kernels.linear_warp_forward(img_np, disp_np)
        ctx.save_for_backward(image, disp)
        return torch.from_numpy(out).to(device=image.device, dtype=image.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        image, disp = ctx.saved_tensors
        gimg, gdisp = _kernels.linear_warp_backward(
            image.detach().cpu().numpy(),
            disp.detach().cpu().numpy(),
            grad_out.detach().cpu().numpy(),
        )
        gimg = torch.from_numpy(gimg).to(device=image.device, dtype=image.dtype)
        gdisp = torch.from_numpy(gdisp).to(device=disp.device, dtype=disp.dtype)
        return (
            gimg if ctx.needs_input_grad[0] else None,
            gdisp if ctx.needs_input_grad[1] else None,
        )


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.from_numpy(arr), True


def warp_image(image, displacement):
    """Resample ``image`` at ``x + displacement(x)`` with multilinear interpolation.

    Differentiable with respect to both arguments when given tensors.
    """
    img, was_np = _as_tensor(image)
    disp, _ = _as_tensor(displacement)
    _check_shapes(img, disp)
    if not torch.isfinite(disp).all():
        raise ValueError("displacement contains non-finite values")
    dtype = torch.promote_types(img.dtype, disp.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float64
    out = _LinearWarp.apply(img.to(dtype), disp.to(dtype))
    return out.numpy() if was_np else out


def warp_labels(mask, displacement):
    """Nearest-neighbour warp of a binary mask; output stays {0, 1}-valued."""
    m, was_np = _as_tensor(mask)
    disp, _ = _as_tensor(displacement)
    _check_shapes(m, disp)
    if not ((m == 0) | (m == 1)).all():
        raise ValueError("mask must be {0,1}-valued")
    m_np = m.detach().cpu().numpy().astype(np.float32)
    d_np = disp.detach().cpu().numpy()
    out = _kernels.nearest_warp(m_np, d_np).astype(m_np.dtype)
    if was_np:
        return out.astype(np.asarray(mask).dtype)
    return torch.from_numpy(out).to(device=m.device, dtype=m.dtype)


def spatial_gradient(field):
    """Forward differences along every spatial axis of a ``(B, C, *S)`` field.

    Returns ``(B, C, D, *S)``; the last slice along each axis repeats the last
    sample, so its difference is zero and output shape matches the input.
    """
    f, was_np = _as_tensor(field)
    if f.dim() < 3:
        raise ShapeError(f"expected (B, C, *S) field, got {tuple(f.shape)}")
    grads = []
    for axis in range(2, f.dim()):
        padded = torch.cat([f, f.narrow(axis, f.shape[axis] - 1, 1)], dim=axis)
        grads.append(padded.narrow(axis, 1, f.shape[axis]) - f)
    out = torch.stack(grads, dim=2)
    return out.numpy() if was_np else out
