"""Training objectives for the displacement and variance estimators.

All expectations over the grid are plain means over pixels and batch items;
per-pixel squared residuals are summed over image channels first.
Quantities marked "stop-gradient" are computed from detached tensors so they
act as constant weights during backpropagation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .warp import ShapeError, spatial_gradient

VARIANCE_FLOOR = 1e-6
ADAREG_C = 50.0
ADAFRAME_A0 = 0.1
ADAFRAME_B0 = 10.0
ADAFRAME_EPS = 1e-8


@dataclass
class LossBreakdown:
    """Loss value with its parts; ``total = data + lam * smooth + alpha * varpen``."""

    total: torch.Tensor
    data_term: torch.Tensor
    smoothness_term: torch.Tensor
    variance_penalty_term: torch.Tensor
    lam: float = 0.0
    alpha: float = 0.0

    def as_floats(self):
        return {
            "total": float(self.total.detach()),
            "data": float(self.data_term.detach()),
            "smooth": float(self.smoothness_term.detach()),
            "varpen": float(self.variance_penalty_term.detach()),
        }


def _breakdown(data, smooth, lam, varpen=None, alpha=0.0):
    zero = torch.zeros((), dtype=data.dtype, device=data.device)
    if varpen is None:
        varpen = zero
    total = data + lam * smooth
    if alpha:
        total = total + alpha * varpen
    return LossBreakdown(total, data, smooth, varpen, float(lam), float(alpha))


def _same_shape(*tensors):
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t is not None and t.shape != ref:
            raise ShapeError(f"shape mismatch: {tuple(ref)} vs {tuple(t.shape)}")


def _check_map(field, image, name):
    """Per-pixel maps are (B, 1, *S) or match the image exactly."""
    if field is None:
        return
    if field.shape[0] != image.shape[0] or field.shape[2:] != image.shape[2:] or field.shape[1] not in (1, image.shape[1]):
        raise ShapeError(f"{name} shape {tuple(field.shape)} incompatible with image {tuple(image.shape)}")


def _check_lambda(lam):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")


def _variance(log_variance):
    return torch.exp(log_variance).clamp_min(VARIANCE_FLOOR)


def _pixel_mean(per_pixel):
    # per_pixel is (B, C, *S); sum channels, average the rest
    return per_pixel.sum(dim=1).mean()


def mse_data_loss(fixed, reconstructed):
    _same_shape(fixed, reconstructed)
    return _pixel_mean((fixed - reconstructed) ** 2)


def mse_loss(fixed, reconstructed, displacement, lam=0.01):
    """Vanilla objective: MSE plus smoothness."""
    _check_lambda(lam)
    return _breakdown(mse_data_loss(fixed, reconstructed), smoothness_penalty(displacement), lam)


def smoothness_penalty(displacement):
    """Mean over the grid of the summed squared forward differences of all components."""
    grad = spatial_gradient(displacement)
    return (grad ** 2).sum(dim=(1, 2)).mean()


def snr_weight_map(fixed, log_variance, gamma):
    """``sigmoid((I_f / sigma)^(2 gamma))`` from a detached variance map.

    ``log_variance=None`` stands for unit variance. Negative intensities are
    treated as zero signal.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if log_variance is None:
        sigma = torch.ones_like(fixed)
    else:
        _check_map(log_variance, fixed, "log_variance")
        sigma = _variance(log_variance.detach()).sqrt()
    ratio = fixed.detach().clamp_min(0) / sigma
    return torch.sigmoid(ratio.pow(2 * gamma))


def adaptive_displacement_loss(fixed, reconstructed, log_variance, displacement, gamma=0.5, lam=0.01):
    """SNR-weighted reconstruction error plus smoothness; updates the displacement side only."""
    _same_shape(fixed, reconstructed)
    _check_lambda(lam)
    weights = snr_weight_map(fixed, log_variance, gamma)
    data = _pixel_mean(weights * (fixed - reconstructed) ** 2)
    return _breakdown(data, smoothness_penalty(displacement), lam)


def variance_loss(fixed, reconstructed, log_variance, beta=0.5):
    """beta-NLL on a detached reconstruction; updates the variance side only."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    _same_shape(fixed, reconstructed)
    _check_map(log_variance, fixed, "log_variance")
    var = _variance(log_variance)
    r2 = (fixed - reconstructed.detach()) ** 2
    prefactor = var.detach() ** beta
    return _pixel_mean(prefactor * (r2 / var + torch.log(var)))


def joint_nll_loss(fixed, reconstructed, log_variance, displacement, lam=0.01):
    _same_shape(fixed, reconstructed)
    _check_map(log_variance, fixed, "log_variance")
    _check_lambda(lam)
    var = _variance(log_variance)
    data = _pixel_mean((fixed - reconstructed) ** 2 / var + torch.log(var))
    return _breakdown(data, smoothness_penalty(displacement), lam)


def joint_beta_nll_loss(fixed, reconstructed, log_variance, displacement, lam=0.01, beta=0.5):
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    _same_shape(fixed, reconstructed)
    _check_map(log_variance, fixed, "log_variance")
    _check_lambda(lam)
    var = _variance(log_variance)
    nll = (fixed - reconstructed) ** 2 / var + torch.log(var)
    data = _pixel_mean(var.detach() ** beta * nll)
    return _breakdown(data, smoothness_penalty(displacement), lam)


def _per_sample(x):
    """Reduce all but the batch axis, keeping dims for broadcasting."""
    return tuple(range(1, x.dim()))


def adareg_weights(fixed, reconstructed, c=ADAREG_C):
    """Per-pixel regularisation weights ``exp(-c * rho / sigma)`` with ``sigma = 1 / mean(rho)``."""
    with torch.no_grad():
        rho = torch.linalg.vector_norm(fixed - reconstructed, dim=1, keepdim=True)
        mean_rho = rho.mean(dim=_per_sample(rho), keepdim=True)
        # rho / sigma with sigma = 1 / mean_rho; no division needed, and
        # mean_rho == 0 gives weights of exactly 1
        return torch.exp(-c * rho * mean_rho)


def adareg_loss(fixed, reconstructed, displacement, lam=0.01):
    _same_shape(fixed, reconstructed)
    _check_lambda(lam)
    alpha = adareg_weights(fixed, reconstructed)
    grad = spatial_gradient(displacement)
    weighted = alpha.unsqueeze(2) * grad
    smooth = (weighted ** 2).sum(dim=(1, 2)).mean()
    return _breakdown(mse_data_loss(fixed, reconstructed), smooth, lam)


def adaframe_weights(fixed, reconstructed, a0=ADAFRAME_A0, b0=ADAFRAME_B0, eps=ADAFRAME_EPS):
    """Data-term weights ``1 - sigmoid(a * rho - b)`` from normalised residuals."""
    with torch.no_grad():
        delta = (fixed - reconstructed).abs()
        dims = _per_sample(delta)
        mu = delta.mean(dim=dims, keepdim=True)
        sd = delta.std(dim=dims, keepdim=True, unbiased=False)
        rho = (delta - mu) / torch.sqrt(sd ** 2 + eps)
        a = a0 / (mu + eps)
        b = b0 * (1 - torch.cos(math.pi * mu))
        return 1 - torch.sigmoid(a * rho - b)


def adaframe_loss(fixed, reconstructed, displacement, lam=0.01):
    _same_shape(fixed, reconstructed)
    _check_lambda(lam)
    alpha = adaframe_weights(fixed, reconstructed)
    data = _pixel_mean(alpha * (fixed - reconstructed) ** 2)
    return _breakdown(data, smoothness_penalty(displacement), lam)


def displacement_variance_penalty(log_variance_z):
    """Mean of ``s - log s`` over the grid, ``s`` the displacement variance; minimised at s = 1."""
    var = _variance(log_variance_z)
    return (var - torch.log(var)).mean()


def displacement_loss_with_z_uncertainty(
    fixed, reconstructed, log_variance_i, sampled_displacement, log_variance_z,
    gamma=0.5, alpha=1e-5, lam=0.01,
):
    """Adaptive displacement loss plus the displacement-variance penalty.

    ``reconstructed`` must come from warping with ``sampled_displacement``.
    """
    if log_variance_z.shape[1] != 1:
        raise ShapeError("displacement variance must be one scalar per pixel")
    _check_map(log_variance_z, sampled_displacement, "log_variance_z")
    base = adaptive_displacement_loss(fixed, reconstructed, log_variance_i, sampled_displacement, gamma, lam)
    return _breakdown(base.data_term, base.smoothness_term, lam, displacement_variance_penalty(log_variance_z), alpha)


# --- heteroscedastic Laplacian variants ------------------------------------------


def _scale(log_scale):
    return torch.exp(log_scale).clamp_min(VARIANCE_FLOOR)


def laplace_nll_loss(fixed, reconstructed, log_scale, displacement, lam=0.01):
    """Joint Laplacian NLL ``|r| / b + log 2b`` plus smoothness."""
    _same_shape(fixed, reconstructed)
    _check_map(log_scale, fixed, "log_scale")
    _check_lambda(lam)
    b = _scale(log_scale)
    data = _pixel_mean((fixed - reconstructed).abs() / b + torch.log(2 * b))
    return _breakdown(data, smoothness_penalty(displacement), lam)


def laplace_beta_nll_loss(fixed, reconstructed, log_scale, displacement, lam=0.01, beta=0.5):
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    _same_shape(fixed, reconstructed)
    _check_map(log_scale, fixed, "log_scale")
    _check_lambda(lam)
    b = _scale(log_scale)
    nll = (fixed - reconstructed).abs() / b + torch.log(2 * b)
    data = _pixel_mean(b.detach() ** beta * nll)
    return _breakdown(data, smoothness_penalty(displacement), lam)


def laplace_variance_loss(fixed, reconstructed, log_scale, beta=0.5):
    """Variance-estimator objective under Laplacian noise (reconstruction detached)."""
    if not 0 <= beta <= 1:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    _same_shape(fixed, reconstructed)
    _check_map(log_scale, fixed, "log_scale")
    b = _scale(log_scale)
    nll = (fixed - reconstructed.detach()).abs() / b + torch.log(2 * b)
    return _pixel_mean(b.detach() ** beta * nll)


def laplace_weight_map(fixed, log_scale, gamma):
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    b = torch.ones_like(fixed) if log_scale is None else _scale(log_scale.detach())
    return torch.sigmoid((fixed.detach().clamp_min(0) / b).pow(gamma))


def laplace_adaptive_displacement_loss(fixed, reconstructed, log_scale, displacement, gamma=0.5, lam=0.01):
    _same_shape(fixed, reconstructed)
    _check_lambda(lam)
    if log_scale is not None:
        _check_map(log_scale, fixed, "log_scale")
    weights = laplace_weight_map(fixed, log_scale, gamma)
    data = _pixel_mean(weights * (fixed - reconstructed).abs())
    return _breakdown(data, smoothness_penalty(displacement), lam)


def laplacian_variant_losses(fixed, reconstructed, log_scale, displacement, gamma=0.5, beta=0.5, lam=0.01):
    """All Laplacian objectives on the same inputs, keyed by name.

    ``variance`` is returned as a breakdown with only the data term set.
    """
    var = laplace_variance_loss(fixed, reconstructed, log_scale, beta)
    zero = torch.zeros_like(var)
    return {
        "nll": laplace_nll_loss(fixed, reconstructed, log_scale, displacement, lam),
        "beta_nll": laplace_beta_nll_loss(fixed, reconstructed, log_scale, displacement, lam, beta),
        "adaptive": laplace_adaptive_displacement_loss(fixed, reconstructed, log_scale, displacement, gamma, lam),
        "variance": LossBreakdown(var, var, zero, zero),
    }
