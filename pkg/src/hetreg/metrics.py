"""Registration accuracy and uncertainty calibration metrics.

Contour metrics work on binary masks of any dimensionality; distances are in
voxels. A boundary voxel is a mask voxel with at least one axis-neighbour
outside the mask, or one lying on the image border.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, ndimage
from scipy.spatial import cKDTree

DEFAULT_FRACTIONS = np.arange(50) * 0.02


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given input (e.g. an empty mask)."""


def _binary(mask):
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("masks must be {0,1}-valued")
    return mask.astype(bool)


def _pair(a, b):
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(mask_a, mask_b):
    """``2|A & B| / (|A| + |B|)``; two empty masks agree perfectly (1.0)."""
    a, b = _pair(mask_a, mask_b)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def boundary(mask):
    mask = _binary(mask)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure, border_value=0)
    return mask & ~interior


def _boundary_points(mask, name):
    pts = np.argwhere(boundary(mask))
    if len(pts) == 0:
        raise UndefinedMetricError(f"{name} is empty")
    return pts.astype(np.float64)


def _directed(src, dst):
    dist, _ = cKDTree(dst).query(src)
    return dist


def hausdorff(mask_a, mask_b):
    a, b = _pair(mask_a, mask_b)
    pa, pb = _boundary_points(a, "mask_a"), _boundary_points(b, "mask_b")
    return float(max(_directed(pa, pb).max(), _directed(pb, pa).max()))


def average_surface_distance(mask_a, mask_b):
    """Symmetrised mean of nearest-boundary distances (average of both directions)."""
    a, b = _pair(mask_a, mask_b)
    pa, pb = _boundary_points(a, "mask_a"), _boundary_points(b, "mask_b")
    return float(0.5 * (_directed(pa, pb).mean() + _directed(pb, pa).mean()))


def endpoint_error(pred, gt, mask=None):
    """Mean Euclidean norm of ``pred - gt`` over ``(D, *S)`` fields, optionally within ``mask``."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"displacement shapes differ: {pred.shape} vs {gt.shape}")
    norm = np.sqrt(((pred - gt) ** 2).sum(axis=0))
    if mask is not None:
        sel = _binary(mask)
        if sel.shape != norm.shape:
            raise ValueError(f"mask shape {sel.shape} != field grid {norm.shape}")
        if not sel.any():
            raise UndefinedMetricError("mask selects no pixels")
        return float(norm[sel].mean())
    return float(norm.mean())


# --- sparsification -----------------------------------------------------------------


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    remaining_mse: np.ndarray
    oracle_mse: np.ndarray

    @property
    def sparsification_error(self):
        return self.remaining_mse - self.oracle_mse

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fraction", "remaining_mse", "oracle_mse", "sparsification_error"])
            for row in zip(self.fractions, self.remaining_mse, self.oracle_mse, self.sparsification_error):
                w.writerow([repr(float(v)) for v in row])


def _remaining_means(errors, order, fractions):
    n = len(errors)
    # suffix sums of the errors left after removing the first k in ``order``
    sorted_err = errors[order]
    tail = np.concatenate([np.cumsum(sorted_err[::-1])[::-1], [0.0]])
    out = np.empty(len(fractions))
    for i, f in enumerate(fractions):
        k = min(int(math.ceil(f * n - 1e-9)), n - 1)
        out[i] = tail[k] / (n - k)
    return out


def sparsification_curve(squared_errors, uncertainties, fractions=DEFAULT_FRACTIONS):
    """Remove the most uncertain ``ceil(f * n)`` pixels and report the MSE of the rest.

    Ties are broken by pixel index (earlier first), identically for the
    oracle, which ranks by the errors themselves.
    """
    err = np.asarray(squared_errors, dtype=np.float64).ravel()
    unc = np.asarray(uncertainties, dtype=np.float64).ravel()
    if err.size == 0:
        raise ValueError("no pixels to rank")
    if err.shape != unc.shape:
        raise ValueError("errors and uncertainties must have the same number of pixels")
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions[0] != 0 or np.any(np.diff(fractions) <= 0) or fractions[-1] >= 1:
        raise ValueError("fractions must start at 0, increase strictly and stay below 1")
    order = np.argsort(-unc, kind="stable")
    oracle = np.argsort(-err, kind="stable")
    return SparsificationCurve(fractions, _remaining_means(err, order, fractions), _remaining_means(err, oracle, fractions))


def average_curves(curves):
    """Pointwise mean of curves sharing one fraction grid."""
    fr = curves[0].fractions
    return SparsificationCurve(
        fr,
        np.mean([c.remaining_mse for c in curves], axis=0),
        np.mean([c.oracle_mse for c in curves], axis=0),
    )


def ause(curve: SparsificationCurve):
    """Trapezoidal area under the sparsification error over the fraction grid."""
    return float(np.trapezoid(curve.sparsification_error, curve.fractions))


# --- statistics -------------------------------------------------------------------


def _t_pdf(x, df):
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))


def t_two_sided_p(t, df):
    """Two-sided tail probability of Student's t by adaptive quadrature."""
    t = abs(t)
    if math.isinf(t):
        return 0.0
    if t < 1.0:
        central, _ = integrate.quad(_t_pdf, 0.0, t, args=(df,), epsabs=1e-14, epsrel=1e-12, limit=200)
        p = 1.0 - 2.0 * central
    else:
        tail, _ = integrate.quad(_t_pdf, t, math.inf, args=(df,), epsabs=1e-300, epsrel=1e-12, limit=200)
        p = 2.0 * tail
    return float(min(max(p, 0.0), 1.0))


def paired_t_test(sample_a, sample_b):
    """Two-sided paired t-test; returns ``(t, p)``.

    Zero-variance differences: ``p = 1`` if they are all zero, else ``p = 0``.
    """
    a, b = np.asarray(sample_a, dtype=np.float64), np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), t_two_sided_p(t, n - 1)
