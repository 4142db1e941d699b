"""Evaluation protocol: warped-mask contour metrics, endpoint error and
sparsification of the predicted intensity uncertainty.

All tables are written as CSV with ``repr`` floats so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .losses import snr_weight_map
from .metrics import (
    UndefinedMetricError,
    average_curves,
    average_surface_distance,
    ause,
    dice,
    endpoint_error,
    hausdorff,
    paired_t_test,
    sparsification_curve,
)
from .training import predict
from .warp import warp_labels

UNCERTAINTY_MODES = ("predicted", "oracle", "shuffled")
CONTOUR_HEADER = ["id", "dsc", "hd", "asd"]
EPE_HEADER = ["id", "epe"]


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


@dataclass
class EvalReport:
    ids: list
    contour: dict = field(default_factory=dict)  # id -> (dsc, hd, asd)
    epe: dict = field(default_factory=dict)  # id -> epe
    curve: Optional[object] = None
    predictions: list = field(default_factory=list)

    def summary(self):
        """Aggregate means; NaN entries (undefined metrics) are excluded."""
        out = {}
        if self.contour:
            cols = np.array(list(self.contour.values()), dtype=np.float64)
            for i, name in enumerate(("dsc", "hd", "asd")):
                col = cols[:, i]
                out[name] = float(np.mean(col[~np.isnan(col)])) if (~np.isnan(col)).any() else math.nan
        out["epe"] = float(np.mean(list(self.epe.values()))) if self.epe else math.nan
        out["ause"] = ause(self.curve) if self.curve is not None else math.nan
        return out


def _uncertainty_maps(pairs, preds, mode, seed):
    rng = np.random.default_rng(seed)
    errors, uncertainties = [], []
    for pair, pred in zip(pairs, preds):
        err = (np.asarray(pair.fixed, np.float64) - pred["reconstructed"].astype(np.float64)) ** 2
        if mode == "oracle":
            unc = err.copy()
        else:
            if pred["log_variance"] is None:
                raise ValueError("model has no variance estimator; use uncertainty mode 'oracle'")
            unc = np.exp(pred["log_variance"].astype(np.float64))
            if mode == "shuffled":
                unc = rng.permutation(unc.ravel()).reshape(unc.shape)
        errors.append(err)
        uncertainties.append(unc)
    return errors, uncertainties


def evaluate(estimators, pairs, ids=None, contour=True, sparsification=True, uncertainty="predicted", seed=0):
    """Evaluate a model on a list of ``ImagePair``; ``ids`` label the rows."""
    if uncertainty not in UNCERTAINTY_MODES:
        raise ValueError(f"uncertainty mode must be one of {UNCERTAINTY_MODES}")
    ids = list(ids) if ids is not None else [f"{i:04d}" for i in range(len(pairs))]
    preds = predict(estimators, pairs)
    report = EvalReport(ids, predictions=preds)
    for pid, pair, pred in zip(ids, pairs, preds):
        if contour and pair.moving_mask is not None and pair.fixed_mask is not None:
            warped = warp_labels(np.asarray(pair.moving_mask)[None, None], pred["displacement"][None])[0, 0]
            vals = [dice(warped, pair.fixed_mask)]
            for fn in (hausdorff, average_surface_distance):
                try:
                    vals.append(fn(warped, pair.fixed_mask))
                except UndefinedMetricError:
                    vals.append(math.nan)
            report.contour[pid] = tuple(vals)
        if pair.gt_displacement is not None:
            report.epe[pid] = endpoint_error(pred["displacement"], pair.gt_displacement)
    has_var = estimators.variance is not None
    if sparsification and (has_var or uncertainty == "oracle"):
        errors, unc = _uncertainty_maps(pairs, preds, uncertainty, seed)
        report.curve = average_curves([sparsification_curve(e, u) for e, u in zip(errors, unc)])
    return report


def write_report(report: EvalReport, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if report.contour:
        path = out_dir / "contour.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CONTOUR_HEADER)
            for pid in report.ids:
                if pid in report.contour:
                    w.writerow([pid] + [_fmt(v) for v in report.contour[pid]])
        written.append(path)
    if report.epe:
        path = out_dir / "epe.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(EPE_HEADER)
            for pid in report.ids:
                if pid in report.epe:
                    w.writerow([pid, _fmt(report.epe[pid])])
        written.append(path)
    if report.curve is not None:
        path = out_dir / "sparsification.csv"
        report.curve.to_csv(path)
        written.append(path)
    path = out_dir / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.summary().items():
            w.writerow([k, _fmt(v)])
    written.append(path)
    return written


def read_result_column(path, column):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or column not in rows[0]:
        raise ValueError(f"{path}: no column {column!r}")
    return {r["id"]: float(r[column]) for r in rows}


def t_test_report(csv_a, csv_b, column, out_path):
    """Paired t-test of ``column`` between two result CSVs matched by pair id."""
    a, b = read_result_column(csv_a, column), read_result_column(csv_b, column)
    if set(a) != set(b):
        raise ValueError(f"result files cover different pair ids: {csv_a} vs {csv_b}")
    keys = sorted(a)
    xa = np.array([a[k] for k in keys])
    xb = np.array([b[k] for k in keys])
    t, p = paired_t_test(xa, xb)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "n", "mean_a", "mean_b", "t", "p"])
        w.writerow([column, len(keys), _fmt(xa.mean()), _fmt(xb.mean()), _fmt(t), _fmt(p)])
    return t, p


# --- image export ---------------------------------------------------------------------


def write_pgm(path, image):
    """8-bit binary PGM, min-max scaled; the scale goes to a ``.json`` sidecar.

    3D volumes export their central slice along the first axis.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[arr.shape[0] // 2]
    if arr.ndim != 2:
        raise ValueError(f"cannot export array of shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"min": lo, "max": hi, "shape": list(np.shape(image))}))
    return path


def read_pgm(path):
    """Inverse of :func:`write_pgm` up to 8-bit quantisation."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
    meta = json.loads(Path(path).with_suffix(".json").read_text())
    return meta["min"] + pix / 255.0 * (meta["max"] - meta["min"])


def export_images(report: EvalReport, pairs, out_dir, gamma):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for pid, pair, pred in zip(report.ids, pairs, report.predictions):
        write_pgm(out_dir / f"{pid}_warped.pgm", pred["reconstructed"])
        lv = pred["log_variance"]
        if lv is not None:
            write_pgm(out_dir / f"{pid}_logvar.pgm", lv)
            f = torch.from_numpy(np.asarray(pair.fixed, np.float32)[None, None])
            wmap = snr_weight_map(f, torch.from_numpy(lv[None, None]), gamma)[0, 0].numpy()
            write_pgm(out_dir / f"{pid}_weights.pgm", wmap)
