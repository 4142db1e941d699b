"""Collaborative training of the displacement and variance estimators.

The schedule runs ``N + 2 * N_w`` epochs: ``N_w`` epochs updating only the
displacement estimator (with unit variance), ``N_w`` epochs updating only the
variance estimator, then ``N`` epochs alternating both within every step.
Baseline objectives train in a single loop for the same number of epochs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch

from . import losses as L
from .models import (
    BackboneSpec,
    ConfigurationError,
    DisplacementEstimator,
    VarianceEstimator,
    sample_displacement,
)
from .warp import warp_image

log = logging.getLogger(__name__)

OBJECTIVES = ("proposed", "proposed+z", "mse", "nll", "beta-nll", "adareg", "adaframe")
COLLABORATIVE = ("proposed", "proposed+z")
WITH_VARIANCE = ("proposed", "proposed+z", "nll", "beta-nll")
LOSS_HEADER = ["step", "epoch", "branch", "total", "data", "smooth", "varpen"]
WEIGHT_HEADER = ["step", "epoch", "w_mean", "w_min", "w_max"]


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, snapshot):
        super().__init__(f"{message}; snapshot: {json.dumps(snapshot)}")
        self.snapshot = snapshot


class CheckpointFormatError(ValueError):
    """A checkpoint archive is unreadable or inconsistent."""


@dataclass
class TrainConfig:
    gamma: float = 0.5
    beta: float = 0.5
    lam: float = 0.01
    alpha: float = 1e-5
    eta: float = 1e-4
    warmup_epochs: int = 10
    main_epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    objective: str = "proposed"
    noise_model: str = "gaussian"
    optimizer: str = "adam"
    deterministic: bool = True
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec.from_dict(self.backbone)
        checks = [
            (self.gamma >= 0, "gamma must be >= 0"),
            (0 <= self.beta <= 1, "beta must lie in [0, 1]"),
            (self.lam > 0, "lam must be > 0"),
            (self.alpha > 0, "alpha must be > 0"),
            (self.eta > 0, "eta must be > 0"),
            (self.warmup_epochs >= 0, "warmup_epochs must be >= 0"),
            (self.main_epochs >= 1, "main_epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.objective in OBJECTIVES, f"objective must be one of {OBJECTIVES}"),
            (self.noise_model in ("gaussian", "laplacian"), "noise_model must be gaussian or laplacian"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigurationError(msg)

    @property
    def total_epochs(self):
        return self.main_epochs + 2 * self.warmup_epochs

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class EpochFlags(NamedTuple):
    flag_disp: bool
    flag_variance: bool
    epoch_index: int


def epoch_schedule(config: TrainConfig, start_epoch: int = 0):
    """Flags for epochs ``start_epoch + 1 .. N + 2 N_w`` (1-based)."""
    nw = config.warmup_epochs
    out = []
    for i in range(start_epoch + 1, config.total_epochs + 1):
        if i <= nw:
            out.append(EpochFlags(True, False, i))
        elif i <= 2 * nw:
            out.append(EpochFlags(False, True, i))
        else:
            out.append(EpochFlags(True, True, i))
    return out


@dataclass
class Estimators:
    displacement: DisplacementEstimator
    variance: Optional[VarianceEstimator] = None

    def modules(self):
        out = {"displacement": self.displacement}
        if self.variance is not None:
            out["variance"] = self.variance
        return out


@dataclass
class Batch:
    moving: torch.Tensor
    fixed: torch.Tensor
    indices: list


@dataclass
class StepRecord:
    step: int
    epoch: int
    branch: str
    total: float
    data: float
    smooth: float
    varpen: float

    def row(self):
        return [self.step, self.epoch, self.branch] + [repr(v) for v in (self.total, self.data, self.smooth, self.varpen)]


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def build_estimators(config: TrainConfig) -> Estimators:
    """Construct estimators; the displacement net's init depends only on the seed."""
    torch.manual_seed(config.seed)
    disp = DisplacementEstimator(config.backbone, z_uncertainty=config.objective == "proposed+z")
    var = None
    if config.objective in WITH_VARIANCE:
        torch.manual_seed(config.seed + 1)
        var = VarianceEstimator(config.backbone)
    return Estimators(disp, var)


def build_optimizers(config: TrainConfig, estimators: Estimators):
    def make(module):
        if config.optimizer == "sgd":
            return torch.optim.SGD(module.parameters(), lr=config.eta)
        return torch.optim.Adam(module.parameters(), lr=config.eta, betas=(0.9, 0.999), eps=1e-8)

    return {name: make(mod) for name, mod in estimators.modules().items()}


def make_batches(pairs, batch_size, rng: np.random.Generator, dtype=torch.float32):
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size].tolist()
        moving = torch.from_numpy(np.stack([pairs[i].moving for i in idx])[:, None]).to(dtype)
        fixed = torch.from_numpy(np.stack([pairs[i].fixed for i in idx])[:, None]).to(dtype)
        yield Batch(moving, fixed, idx)


def _param_norms(*modules):
    return {
        f"{type(m).__name__}.{name}": float(p.detach().norm())
        for m in modules if m is not None
        for name, p in m.named_parameters()
    }


def _check_finite(value, batch, estimators, branch):
    if not torch.isfinite(value).all():
        snapshot = {
            "branch": branch,
            "batch_indices": [int(i) for i in batch.indices],
            "parameter_norms": _param_norms(estimators.displacement, estimators.variance),
        }
        raise NonFiniteLossError(f"non-finite {branch} loss", snapshot)


def _record(step, epoch, branch, breakdown):
    parts = breakdown.as_floats()
    return StepRecord(step, epoch, branch, parts["total"], parts["data"], parts["smooth"], parts["varpen"])


def displacement_branch(batch, estimators, optimizer, use_variance, config, generator=None):
    """One update of the displacement estimator; the variance map enters detached.

    Returns ``(breakdown, weight_map)``.
    """
    m, f = batch.moving, batch.fixed
    post = estimators.displacement(m, f)
    z = post.mean
    if config.objective == "proposed+z":
        z = sample_displacement(post, generator)
    _check_finite(z, batch, estimators, "displacement")
    recon = warp_image(m, z)
    log_var = None
    if use_variance:
        with torch.no_grad():
            log_var = estimators.variance(f, recon)
    if config.noise_model == "laplacian":
        loss = L.laplace_adaptive_displacement_loss(f, recon, log_var, z, config.gamma, config.lam)
        weights = L.laplace_weight_map(f, log_var, config.gamma)
    else:
        weights = L.snr_weight_map(f, log_var, config.gamma)
        if config.objective == "proposed+z":
            loss = L.displacement_loss_with_z_uncertainty(
                f, recon, log_var, z, post.log_variance_z, config.gamma, config.alpha, config.lam
            )
        else:
            loss = L.adaptive_displacement_loss(f, recon, log_var, z, config.gamma, config.lam)
    _check_finite(loss.total, batch, estimators, "displacement")
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    return loss, weights


def variance_branch(batch, estimators, optimizer, config):
    """One update of the variance estimator from a fresh, detached displacement prediction."""
    m, f = batch.moving, batch.fixed
    with torch.no_grad():
        z = estimators.displacement(m, f).mean
        _check_finite(z, batch, estimators, "variance")
        recon = warp_image(m, z)
    log_var = estimators.variance(f, recon)
    if config.noise_model == "laplacian":
        value = L.laplace_variance_loss(f, recon, log_var, config.beta)
    else:
        value = L.variance_loss(f, recon, log_var, config.beta)
    _check_finite(value, batch, estimators, "variance")
    optimizer.zero_grad(set_to_none=True)
    value.backward()
    optimizer.step()
    zero = torch.zeros_like(value)
    return L.LossBreakdown(value, value, zero, zero)


def train_step_collaborative(batch, estimators, optimizers, flags: EpochFlags, config, step=0, generator=None):
    """Run the branches enabled by ``flags``; returns ``(records, weight_map or None)``."""
    records, weights = [], None
    if flags.flag_disp:
        loss, weights = displacement_branch(
            batch, estimators, optimizers["displacement"], flags.flag_variance, config, generator
        )
        records.append(_record(step, flags.epoch_index, "displacement", loss))
    if flags.flag_variance:
        loss = variance_branch(batch, estimators, optimizers["variance"], config)
        records.append(_record(step, flags.epoch_index, "variance", loss))
    return records, weights


def baseline_loss(batch, estimators, config):
    m, f = batch.moving, batch.fixed
    z = estimators.displacement(m, f).mean
    _check_finite(z, batch, estimators, "joint")
    recon = warp_image(m, z)
    obj = config.objective
    if obj == "mse":
        return L.mse_loss(f, recon, z, config.lam)
    if obj == "adareg":
        return L.adareg_loss(f, recon, z, config.lam)
    if obj == "adaframe":
        return L.adaframe_loss(f, recon, z, config.lam)
    log_var = estimators.variance(f, recon)
    laplace = config.noise_model == "laplacian"
    if obj == "nll":
        fn = L.laplace_nll_loss if laplace else L.joint_nll_loss
        return fn(f, recon, log_var, z, config.lam)
    if obj == "beta-nll":
        fn = L.laplace_beta_nll_loss if laplace else L.joint_beta_nll_loss
        return fn(f, recon, log_var, z, config.lam, config.beta)
    raise ConfigurationError(f"{obj!r} is not a baseline objective")


def train_step_baseline(batch, estimators, optimizers, config, step=0, epoch=0):
    loss = baseline_loss(batch, estimators, config)
    _check_finite(loss.total, batch, estimators, "joint")
    for opt in optimizers.values():
        opt.zero_grad(set_to_none=True)
    loss.total.backward()
    for opt in optimizers.values():
        opt.step()
    return _record(step, epoch, "joint", loss)


# --- prediction ---------------------------------------------------------------------


@torch.no_grad()
def predict(estimators, pairs, batch_size=8):
    """Mean displacement, reconstruction and log-variance (or None) per pair, as numpy."""
    out = []
    dtype = next(estimators.displacement.parameters()).dtype
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        m = torch.from_numpy(np.stack([p.moving for p in chunk])[:, None]).to(dtype)
        f = torch.from_numpy(np.stack([p.fixed for p in chunk])[:, None]).to(dtype)
        z = estimators.displacement(m, f).mean
        recon = warp_image(m, z)
        lv = estimators.variance(f, recon) if estimators.variance is not None else None
        for i in range(len(chunk)):
            out.append({
                "displacement": z[i].numpy(),
                "reconstructed": recon[i, 0].numpy(),
                "log_variance": None if lv is None else lv[i, 0].numpy(),
            })
    return out


def mean_endpoint_error(estimators, pairs):
    from .metrics import endpoint_error

    preds = predict(estimators, pairs)
    return float(np.mean([endpoint_error(p["displacement"], pair.gt_displacement) for p, pair in zip(preds, pairs)]))


# --- training loops -----------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    estimators: Estimators
    optimizers: dict
    records: list
    epoch: int
    step: int
    epe_history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None


class _Logs:
    def __init__(self, out_dir, append=False):
        self.loss = self.weights = None
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        self._files = [open(out_dir / "loss.csv", mode, newline=""), open(out_dir / "weights.csv", mode, newline="")]
        self.loss, self.weights = (csv.writer(fh) for fh in self._files)
        if not append:
            self.loss.writerow(LOSS_HEADER)
            self.weights.writerow(WEIGHT_HEADER)

    def close(self):
        for fh in getattr(self, "_files", []):
            fh.close()


def _run(config, pairs, out_dir, eval_pairs, resume_from, step_fn):
    if not pairs:
        raise ValueError("training dataset is empty")
    if config.deterministic:
        set_deterministic(True)
    out_dir = Path(out_dir) if out_dir is not None else None

    if resume_from is not None:
        state = load_checkpoint(resume_from, backbone=config.backbone)
        estimators, optimizers = restore(state)
        start_epoch, step = state.epoch, state.step
    else:
        estimators = build_estimators(config)
        optimizers = build_optimizers(config, estimators)
        start_epoch, step = 0, 0

    rng = np.random.default_rng(config.seed)
    # replay shuffles of completed epochs so a resumed run sees the same batches
    for _ in range(start_epoch):
        rng.permutation(len(pairs))
    generator = torch.Generator().manual_seed(config.seed + 2)

    logs = _Logs(out_dir, append=resume_from is not None)
    records, epe_history, ckpt = [], [], None
    try:
        if eval_pairs is not None and start_epoch == 0:
            epe_history.append(mean_endpoint_error(estimators, eval_pairs))
        for flags in epoch_schedule(config, start_epoch):
            for batch in make_batches(pairs, config.batch_size, rng):
                step += 1
                new, weights = step_fn(batch, estimators, optimizers, flags, config, step, generator)
                records.extend(new)
                if logs.loss is not None:
                    for r in new:
                        logs.loss.writerow(r.row())
                    if weights is not None:
                        w = weights.detach()
                        logs.weights.writerow([step, flags.epoch_index] + [repr(float(v)) for v in (w.mean(), w.min(), w.max())])
            if eval_pairs is not None:
                epe_history.append(mean_endpoint_error(estimators, eval_pairs))
            if out_dir is not None:
                ckpt = out_dir / "checkpoint.zip"
                save_checkpoint(TrainState(config, estimators, optimizers, flags.epoch_index, step), ckpt)
            log.info("epoch %d/%d done (step %d)", flags.epoch_index, config.total_epochs, step)
    finally:
        logs.close()
    return TrainResult(config, estimators, optimizers, records, config.total_epochs, step, epe_history, ckpt)


def _collaborative_step(batch, estimators, optimizers, flags, config, step, generator):
    return train_step_collaborative(batch, estimators, optimizers, flags, config, step, generator)


def _baseline_step(batch, estimators, optimizers, flags, config, step, generator):
    return [train_step_baseline(batch, estimators, optimizers, config, step, flags.epoch_index)], None


def train(config: TrainConfig, pairs, out_dir=None, eval_pairs=None, resume_from=None):
    """Collaborative training; baseline objectives are routed to :func:`train_baseline`."""
    if config.objective not in COLLABORATIVE:
        return train_baseline(config, pairs, out_dir, eval_pairs, resume_from)
    return _run(config, pairs, out_dir, eval_pairs, resume_from, _collaborative_step)


def train_baseline(config: TrainConfig, pairs, out_dir=None, eval_pairs=None, resume_from=None):
    """Single-loop training on a baseline objective for ``N + 2 N_w`` epochs."""
    if config.objective in COLLABORATIVE:
        raise ConfigurationError(f"{config.objective!r} uses the collaborative loop; call train()")
    return _run(config, pairs, out_dir, eval_pairs, resume_from, _baseline_step)


# --- checkpoints ----------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    estimators: Estimators
    optimizers: dict
    epoch: int
    step: int


@dataclass
class LoadedCheckpoint:
    config: TrainConfig
    epoch: int
    step: int
    arrays: dict
    optimizer_meta: dict


def parameter_digest(module) -> str:
    """SHA-256 over all parameter bytes; equal digests mean bit-identical weights."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _state_arrays(state: TrainState):
    arrays, opt_meta = {}, {}
    for mname, module in state.estimators.modules().items():
        for pname, p in module.named_parameters():
            arrays[f"{mname}/{pname}"] = p.detach().cpu().numpy()
        opt = state.optimizers[mname]
        sd = opt.state_dict()
        opt_meta[mname] = {"param_groups": sd["param_groups"], "steps": {}}
        for idx, st in sd["state"].items():
            for key, val in st.items():
                if key == "step":
                    opt_meta[mname]["steps"][str(idx)] = float(val)
                elif torch.is_tensor(val):
                    arrays[f"optim/{mname}/{idx}/{key}"] = val.detach().cpu().numpy()
    return arrays, opt_meta


def save_checkpoint(state: TrainState, path):
    """Write a zip with one raw little-endian float32 file per array plus JSON metadata."""
    path = Path(path)
    arrays, opt_meta = _state_arrays(state)
    manifest = []
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for i, (name, arr) in enumerate(arrays.items()):
                fname = f"arrays/{i:05d}.f32"
                zf.writestr(fname, np.ascontiguousarray(arr, dtype="<f4").tobytes())
                manifest.append({"name": name, "file": fname, "shape": list(arr.shape)})
            zf.writestr("manifest.json", json.dumps(manifest, indent=1))
            meta = {
                "format": "hetreg-checkpoint/1",
                "config": state.config.to_dict(),
                "epoch": state.epoch,
                "step": state.step,
                "seed": state.config.seed,
                "optimizers": opt_meta,
            }
            zf.writestr("meta.json", json.dumps(meta, indent=1))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    finally:
        if tmp.exists():
            tmp.unlink()
    return path


def load_checkpoint(path, backbone: Optional[BackboneSpec] = None) -> LoadedCheckpoint:
    """Read and validate a checkpoint without touching any model.

    ``backbone``, if given, must match the stored spec exactly.
    """
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        size = path.stat().st_size
        raise CheckpointFormatError(f"{path}: not a checkpoint archive (no directory found scanning back from offset {size})") from exc
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    with zf:
        bad = zf.testzip()
        if bad is not None:
            info = zf.getinfo(bad)
            raise CheckpointFormatError(f"{path}: CRC mismatch in {bad} at offset {info.header_offset}")
        try:
            meta = json.loads(zf.read("meta.json"))
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: missing or malformed metadata ({exc})") from exc
        config = TrainConfig.from_dict(meta["config"])
        if backbone is not None and config.backbone != backbone:
            raise ConfigurationError(f"checkpoint backbone {config.backbone} does not match {backbone}")
        arrays = {}
        for entry in manifest:
            info = zf.getinfo(entry["file"])
            raw = zf.read(entry["file"])
            expected = 4 * int(np.prod(entry["shape"], dtype=np.int64))
            if len(raw) != expected:
                raise CheckpointFormatError(
                    f"{path}: {entry['name']} at offset {info.header_offset} has {len(raw)} bytes, expected {expected}"
                )
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return LoadedCheckpoint(config, meta["epoch"], meta["step"], arrays, meta.get("optimizers", {}))


def restore(ckpt: LoadedCheckpoint):
    """Build estimators and optimizers and load a checkpoint into them (all or nothing)."""
    estimators = build_estimators(ckpt.config)
    optimizers = build_optimizers(ckpt.config, estimators)
    expected = {
        f"{m}/{n}": p for m, mod in estimators.modules().items() for n, p in mod.named_parameters()
    }
    missing = set(expected) - {k for k in ckpt.arrays if not k.startswith("optim/")}
    if missing:
        raise ConfigurationError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in expected.items():
        if tuple(ckpt.arrays[name].shape) != tuple(p.shape):
            raise ConfigurationError(f"{name}: checkpoint shape {ckpt.arrays[name].shape} != model {tuple(p.shape)}")
    with torch.no_grad():
        for name, p in expected.items():
            p.copy_(torch.from_numpy(ckpt.arrays[name]))
    for mname, opt in optimizers.items():
        meta = ckpt.optimizer_meta.get(mname)
        if not meta:
            continue
        sd = opt.state_dict()
        state = {}
        for idx_str, step in meta["steps"].items():
            idx = int(idx_str)
            entry = {"step": torch.tensor(step)}
            for key in ("exp_avg", "exp_avg_sq", "momentum_buffer"):
                arr = ckpt.arrays.get(f"optim/{mname}/{idx}/{key}")
                if arr is not None:
                    entry[key] = torch.from_numpy(arr.copy())
            state[idx] = entry
        sd["state"] = state
        sd["param_groups"] = meta["param_groups"]
        opt.load_state_dict(sd)
    return estimators, optimizers
