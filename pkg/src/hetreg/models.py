"""Displacement and variance estimators on a small convolutional U-Net.

Both estimators share :class:`UNetBackbone`; anything producing a
``(B, out_channels, *S)`` feature map at input resolution can stand in for it
(a transformer encoder, for instance) by subclassing :class:`Backbone`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigurationError(ValueError):
    """Raised for inconsistent model or training configuration."""


@dataclass(frozen=True)
class BackboneSpec:
    encoder: Sequence[int] = (16, 32, 32, 32)
    decoder: Sequence[int] = (32, 32, 32, 16)
    ndim: int = 2
    skip: bool = True
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(int(w) for w in self.encoder))
        object.__setattr__(self, "decoder", tuple(int(w) for w in self.decoder))
        if len(self.encoder) < 2:
            raise ConfigurationError("backbone needs at least 2 levels")
        if len(self.decoder) != len(self.encoder):
            raise ConfigurationError("decoder must list one width per encoder level")
        if min(self.encoder + self.decoder) <= 0:
            raise ConfigurationError("channel widths must be positive")
        if self.ndim not in (2, 3):
            raise ConfigurationError(f"ndim must be 2 or 3, got {self.ndim}")

    @property
    def levels(self):
        return len(self.encoder)

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = list(self.encoder)
        d["decoder"] = list(self.decoder)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _conv_params(spec, cin, cout):
    return spec.kernel_size ** spec.ndim * cin * cout + cout


def backbone_parameter_count(spec: BackboneSpec, in_channels: int) -> int:
    """Number of trainable parameters in :class:`UNetBackbone`.

    Every layer is a ``k**ndim`` convolution with bias. Encoder level ``i``
    maps ``enc[i-1] -> enc[i]`` (``in_channels`` for ``i = 0``). Decoder
    layer ``j < L-1`` maps its input to ``dec[j]`` and is followed by 2x
    upsampling and concatenation with ``enc[L-2-j]`` (when skips are on); the
    last decoder layer runs at full resolution.
    """
    total = 0
    prev = in_channels
    for w in spec.encoder:
        total += _conv_params(spec, prev, w)
        prev = w
    for j, w in enumerate(spec.decoder):
        total += _conv_params(spec, prev, w)
        prev = w
        if j < spec.levels - 1 and spec.skip:
            prev += spec.encoder[spec.levels - 2 - j]
    return total


def estimator_parameter_count(spec: BackboneSpec, in_channels: int, head_channels: Sequence[int]) -> int:
    """Backbone count plus one ``k**ndim`` convolution per output head."""
    return backbone_parameter_count(spec, in_channels) + sum(
        _conv_params(spec, spec.decoder[-1], c) for c in head_channels
    )


class Backbone(nn.Module):
    """Maps ``(B, in_channels, *S)`` to ``(B, out_channels, *S)``."""

    out_channels: int


class UNetBackbone(Backbone):

    def __init__(self, spec: BackboneSpec, in_channels: int):
        super().__init__()
        self.spec = spec
        conv = nn.Conv2d if spec.ndim == 2 else nn.Conv3d
        pad = spec.kernel_size // 2

        self.encoder = nn.ModuleList()
        prev = in_channels
        for i, w in enumerate(spec.encoder):
            stride = 1 if i == 0 else 2
            self.encoder.append(conv(prev, w, spec.kernel_size, stride=stride, padding=pad))
            prev = w

        self.decoder = nn.ModuleList()
        for j, w in enumerate(spec.decoder):
            self.decoder.append(conv(prev, w, spec.kernel_size, padding=pad))
            prev = w
            if j < spec.levels - 1 and spec.skip:
                prev += spec.encoder[spec.levels - 2 - j]
        self.out_channels = spec.decoder[-1]

    def forward(self, x):
        factor = 2 ** (self.spec.levels - 1)
        if any(s % factor for s in x.shape[2:]):
            raise ConfigurationError(
                f"spatial shape {tuple(x.shape[2:])} not divisible by {factor} for a {self.spec.levels}-level backbone"
            )
        skips = []
        for layer in self.encoder:
            x = F.leaky_relu(layer(x), 0.2)
            skips.append(x)
        skips.pop()
        for j, layer in enumerate(self.decoder):
            x = F.leaky_relu(layer(x), 0.2)
            if j < self.spec.levels - 1:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                if self.spec.skip:
                    x = torch.cat([x, skips.pop()], dim=1)
        return x


def _head(spec, cin, cout, weight_std):
    conv = nn.Conv2d if spec.ndim == 2 else nn.Conv3d
    layer = conv(cin, cout, spec.kernel_size, padding=spec.kernel_size // 2)
    nn.init.normal_(layer.weight, mean=0.0, std=weight_std)
    nn.init.zeros_(layer.bias)
    return layer


@dataclass
class DisplacementPosterior:
    """Mean displacement ``(B, D, *S)`` and optional isotropic log-variance ``(B, 1, *S)``."""

    mean: torch.Tensor
    log_variance_z: Optional[torch.Tensor] = None


class DisplacementEstimator(nn.Module):
    """``(moving, fixed) -> DisplacementPosterior``."""

    def __init__(self, spec: BackboneSpec = BackboneSpec(), z_uncertainty: bool = False, backbone: Backbone = None):
        super().__init__()
        self.spec = spec
        self.z_uncertainty = z_uncertainty
        self.backbone = backbone if backbone is not None else UNetBackbone(spec, in_channels=2)
        self.flow = _head(spec, self.backbone.out_channels, spec.ndim, 1e-5)
        self.log_sigma_z = _head(spec, self.backbone.out_channels, 1, 1e-5) if z_uncertainty else None

    def forward(self, moving, fixed):
        if moving.shape != fixed.shape:
            raise ConfigurationError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} differ")
        feats = self.backbone(torch.cat([moving, fixed], dim=1))
        lvz = self.log_sigma_z(feats) if self.log_sigma_z is not None else None
        return DisplacementPosterior(self.flow(feats), lvz)


class VarianceEstimator(nn.Module):
    """``(fixed, reconstructed) -> log sigma^2`` per pixel."""

    def __init__(self, spec: BackboneSpec = BackboneSpec(), backbone: Backbone = None):
        super().__init__()
        self.spec = spec
        self.backbone = backbone if backbone is not None else UNetBackbone(spec, in_channels=2)
        self.head = _head(spec, self.backbone.out_channels, 1, 1e-5)

    def forward(self, fixed, reconstructed):
        if fixed.shape != reconstructed.shape:
            raise ConfigurationError(f"fixed {tuple(fixed.shape)} and reconstructed {tuple(reconstructed.shape)} differ")
        return self.head(self.backbone(torch.cat([fixed, reconstructed], dim=1)))


def sample_displacement(posterior: DisplacementPosterior, generator: torch.Generator = None):
    """Reparameterised draw ``mu + sigma * eps`` with one sigma per pixel.

    Each displacement component gets its own standard-normal ``eps``.
    """
    if posterior.log_variance_z is None:
        raise RuntimeError("posterior has no displacement variance; enable the uncertainty head")
    mu = posterior.mean
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    sigma = torch.exp(0.5 * posterior.log_variance_z)
    return mu + sigma * eps
