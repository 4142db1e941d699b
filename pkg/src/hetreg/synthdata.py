"""Synthetic cardiac-like phantoms with known deformation and noise, plus dataset I/O.

A phantom is a bright elliptical ring (the "myocardium", which is also the
label mask) around a darker blood pool, on a smoothly textured background.
The fixed image is the moving image pulled through a smooth random
displacement, plus zero-mean Gaussian noise whose standard deviation varies
per pixel::

    sigma(x) = sigma_min + (sigma_max - sigma_min) * g(x)

with ``g`` the clean warped intensity (``profile="intensity"``) or a
three-level banding of it (``profile="banded"``).

Arrays on disk are raw little-endian float32 with a JSON sidecar holding
``shape``, ``dtype`` and ``order``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .warp import ImagePair, warp_image, warp_labels


# Mean squared forward-difference gradient of a generated field is bounded by
# SMOOTHNESS_CONSTANT * ndim**2 * (amplitude / smoothing)**2; see
# tests/test_synthdata.py for the empirical check.
SMOOTHNESS_CONSTANT = 0.25


class DatasetFormatError(ValueError):
    """A dataset directory or array file is missing or malformed."""


@dataclass
class SynthParams:
    shape: Sequence[int] = (64, 64)
    amplitude: float = 3.0
    smoothing: float = 8.0
    phantom: str = "ring"
    sigma_min: float = 0.01
    sigma_max: float = 0.15
    profile: str = "intensity"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) not in (2, 3):
            raise ValueError(f"shape must be 2D or 3D, got {self.shape}")
        if self.sigma_min < 0 or self.sigma_max < self.sigma_min:
            raise ValueError("need 0 <= sigma_min <= sigma_max")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be > 0")
        if self.phantom not in ("ring", "ellipse"):
            raise ValueError(f"unknown phantom {self.phantom!r}")
        if self.profile not in ("intensity", "banded"):
            raise ValueError(f"unknown noise profile {self.profile!r}")

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        return d


@dataclass
class SyntheticPair(ImagePair):
    """Image pair that also carries the per-pixel noise standard deviation."""

    noise_std: Optional[np.ndarray] = None


def _texture(rng, shape, scale):
    t = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    t -= t.min()
    peak = t.max()
    return t / peak if peak > 0 else t


def make_phantom(params: SynthParams, rng: np.random.Generator):
    """Return ``(image, mask)``; mask marks the ring (or the whole ellipse)."""
    shape = params.shape
    ndim = len(shape)
    n = np.array(shape, dtype=float)
    centre = (n - 1) / 2 + rng.uniform(-0.08, 0.08, ndim) * n
    outer = rng.uniform(0.26, 0.34, ndim) * n
    thickness = rng.uniform(0.3, 0.4)

    coords = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    if ndim == 2:
        theta = rng.uniform(0, math.pi)
        dy, dx = coords[0] - centre[0], coords[1] - centre[1]
        u = dy * math.cos(theta) + dx * math.sin(theta)
        v = -dy * math.sin(theta) + dx * math.cos(theta)
        radius = np.sqrt((u / outer[0]) ** 2 + (v / outer[1]) ** 2)
    else:
        radius = np.sqrt(sum(((c - m) / r) ** 2 for c, m, r in zip(coords, centre, outer)))

    inside = radius <= 1.0
    if params.phantom == "ring":
        mask = inside & (radius >= 1.0 - thickness)
        pool = radius < 1.0 - thickness
    else:
        mask = inside
        pool = np.zeros(shape, dtype=bool)

    background = 0.05 + 0.25 * _texture(rng, shape, 3.0)
    image = background
    image = np.where(pool, 0.35 + 0.1 * _texture(rng, shape, 2.0), image)
    image = np.where(mask, 0.7 + 0.25 * _texture(rng, shape, 1.5), image)
    # soften the edges slightly so the interpolated image stays band-limited
    image = ndimage.gaussian_filter(image, 0.7)
    return np.clip(image, 0.0, 1.0), mask.astype(np.float64)


def random_displacement(shape, amplitude, smoothing, rng):
    """Gaussian-smoothed white vector noise scaled so the largest vector has length ``amplitude``."""
    ndim = len(shape)
    if amplitude == 0:
        return np.zeros((ndim,) + tuple(shape))
    field = np.stack([
        ndimage.gaussian_filter(rng.standard_normal(shape), smoothing, mode="reflect")
        for _ in range(ndim)
    ])
    peak = np.sqrt((field ** 2).sum(axis=0)).max()
    return field * (amplitude / peak)


def noise_profile(intensity, params: SynthParams):
    if params.profile == "intensity":
        g = intensity
    else:
        g = np.select([intensity < 1 / 3, intensity < 2 / 3], [0.0, 0.5], 1.0)
    return params.sigma_min + (params.sigma_max - params.sigma_min) * np.clip(g, 0.0, 1.0)


def inject_heteroscedastic_noise(image, sigma, rng: np.random.Generator):
    """Add independent N(0, sigma(x)^2) noise per pixel and clip to [0, 1].

    A zero standard deviation leaves the pixel untouched (apart from clipping).
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), np.shape(image))
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise ValueError("noise standard deviation must be finite and non-negative")
    noisy = image + sigma * rng.standard_normal(np.shape(image))
    return np.clip(noisy, 0.0, 1.0)


def generate_pair(params: SynthParams, rng: np.random.Generator) -> SyntheticPair:
    moving, moving_mask = make_phantom(params, rng)
    disp = random_displacement(params.shape, params.amplitude, params.smoothing, rng)
    clean = warp_image(moving[None, None], disp[None])[0, 0]
    sigma = noise_profile(clean, params)
    if params.sigma_max > 0:
        fixed = inject_heteroscedastic_noise(clean, sigma, rng)
    else:
        fixed = clean
    fixed_mask = warp_labels(moving_mask[None, None], disp[None])[0, 0]
    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    return SyntheticPair(
        moving=f32(moving),
        fixed=f32(fixed),
        moving_mask=f32(moving_mask),
        fixed_mask=f32(fixed_mask),
        gt_displacement=f32(disp),
        noise_std=f32(sigma),
    )


def generate_dataset(params: SynthParams, n: int, seed: int):
    """``n`` pairs, each drawn from its own child stream of ``seed``."""
    if n <= 0:
        raise ValueError("dataset must contain at least one pair")
    streams = np.random.SeedSequence(seed).spawn(n)
    return [generate_pair(params, np.random.default_rng(s)) for s in streams]


def split_indices(n: int, seed: int, ratios=(0.6, 0.2, 0.2)):
    """Seeded shuffle, then prefix split into train/val/test index lists."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    return {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train:n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val:].tolist()),
    }


# --- preprocessing --------------------------------------------------------------


def center_crop(image_stack, size, centroid):
    """Crop ``(C, *S)`` to ``size`` around ``centroid``, zero-padding outside the image.

    The window starts at ``floor(centroid + 0.5) - size // 2`` on each axis.
    """
    image_stack = np.asarray(image_stack)
    spatial = image_stack.shape[1:]
    size = tuple(int(s) for s in size)
    if len(size) != len(spatial) or len(centroid) != len(spatial):
        raise ValueError("size and centroid need one entry per spatial axis")
    if min(size) <= 0:
        raise ValueError("crop size must be positive")
    out = np.zeros((image_stack.shape[0],) + size, dtype=image_stack.dtype)
    src, dst = [], []
    for n, s, c in zip(spatial, size, centroid):
        start = int(math.floor(c + 0.5)) - s // 2
        lo, hi = max(start, 0), min(start + s, n)
        if lo >= hi:
            raise ValueError(f"crop window [{start}, {start + s}) lies outside an axis of length {n}")
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[(slice(None), *dst)] = image_stack[(slice(None), *src)]
    return out


def resize(image, target_shape, nearest=False):
    """Align-corners resampling; ``nearest=True`` for label maps."""
    image = np.asarray(image)
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != image.ndim or min(target_shape) <= 0:
        raise ValueError(f"invalid target shape {target_shape} for a {image.ndim}D image")
    if target_shape == image.shape:
        return image.copy()
    axes = [np.linspace(0, n - 1, m) for n, m in zip(image.shape, target_shape)]
    coords = np.meshgrid(*axes, indexing="ij")
    if nearest:
        idx = tuple(np.floor(c + 0.5).astype(np.intp) for c in coords)
        return image[idx]
    return ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="nearest").astype(image.dtype)


# --- dataset files --------------------------------------------------------------


def write_array(path, array):
    path = Path(path)
    array = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(array.tobytes())
    meta = {"shape": list(array.shape), "dtype": "<f4", "order": "C"}
    path.with_suffix(".json").write_text(json.dumps(meta))


def read_array(path):
    path = Path(path)
    sidecar = path.with_suffix(".json")
    for p in (path, sidecar):
        if not p.exists():
            raise DatasetFormatError(f"missing file: {p}")
    try:
        meta = json.loads(sidecar.read_text())
        shape = tuple(int(s) for s in meta["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"bad sidecar {sidecar}: {exc}") from exc
    if meta.get("dtype") != "<f4" or meta.get("order", "C") != "C":
        raise DatasetFormatError(f"unsupported dtype/order in {sidecar}")
    raw = path.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def save_dataset(pairs, directory, seed: int = 0, ratios=(0.6, 0.2, 0.2), splits=None):
    """Write ``manifest.json`` and ``pairs/<id>/*.f32``; returns the manifest dict."""
    directory = Path(directory)
    if not pairs:
        raise ValueError("refusing to write an empty dataset")
    splits = splits or split_indices(len(pairs), seed, ratios)
    split_of = {i: name for name, idx in splits.items() for i in idx}
    records = []
    for i, pair in enumerate(pairs):
        pid = f"{i:04d}"
        pdir = directory / "pairs" / pid
        pdir.mkdir(parents=True, exist_ok=True)
        arrays = {
            "moving": pair.moving,
            "fixed": pair.fixed,
            "moving_mask": pair.moving_mask,
            "fixed_mask": pair.fixed_mask,
            "gt_disp": pair.gt_displacement,
        }
        files = {}
        for name, arr in arrays.items():
            if arr is None:
                continue
            rel = f"pairs/{pid}/{name}.f32"
            write_array(directory / rel, arr)
            files[name] = rel
        records.append({
            "id": pid,
            "split": split_of.get(i, "train"),
            "shape": list(pair.shape),
            "ndim": pair.ndim,
            "files": files,
        })
    manifest = {"version": 1, "seed": seed, "pairs": records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_dataset(directory, split: Optional[str] = None):
    """Read and validate a dataset; returns ``(manifest, {id: ImagePair})``."""
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise DatasetFormatError(f"missing file: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        records = manifest["pairs"]
    except (ValueError, KeyError) as exc:
        raise DatasetFormatError(f"bad manifest {mpath}: {exc}") from exc
    pairs = {}
    for rec in records:
        if split is not None and rec.get("split") != split:
            continue
        files = rec.get("files", {})
        for required in ("moving", "fixed"):
            if required not in files:
                raise DatasetFormatError(f"{mpath}: pair {rec.get('id')} lacks {required}")
        arrays = {name: read_array(directory / rel) for name, rel in files.items()}
        shape = tuple(rec["shape"])
        for name, arr in arrays.items():
            spatial = arr.shape[1:] if name == "gt_disp" else arr.shape
            if tuple(spatial) != shape:
                raise DatasetFormatError(f"{directory / files[name]}: shape {arr.shape} disagrees with manifest {shape}")
        pairs[rec["id"]] = ImagePair(
            moving=arrays["moving"],
            fixed=arrays["fixed"],
            moving_mask=arrays.get("moving_mask"),
            fixed_mask=arrays.get("fixed_mask"),
            gt_displacement=arrays.get("gt_disp"),
        )
    return manifest, pairs
