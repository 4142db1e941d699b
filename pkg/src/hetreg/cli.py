"""``hetreg`` command line: synth | train | eval | sweep-gamma.

Configs are flat JSON objects with dotted keys, e.g.::

    {"seed": 0, "output": "runs/demo",
     "synth.n": 64, "synth.shape": [64, 64],
     "train.objective": "proposed", "train.gamma": 0.5,
     "train.backbone.encoder": [16, 32, 32, 32]}

Nested objects are flattened before validation. Unknown keys are rejected.
Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .evaluation import UNCERTAINTY_MODES, evaluate, export_images, t_test_report, write_report
from .models import BackboneSpec, ConfigurationError
from .synthdata import SynthParams, generate_dataset, load_dataset, save_dataset, split_indices
from .training import TrainConfig, load_checkpoint, restore, set_deterministic, train

log = logging.getLogger("hetreg")

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed", "deterministic", "backbone"}
_BACKBONE_KEYS = {f.name for f in fields(BackboneSpec)}
_SYNTH_KEYS = {f.name for f in fields(SynthParams)} | {"n", "split"}

DEFAULTS = {
    "seed": 0,
    "output": "hetreg-out",
    "deterministic": True,
    "data.path": None,
    "eval.split": "test",
    "eval.checkpoint": None,
    "eval.contour": True,
    "eval.sparsification": True,
    "eval.uncertainty": "predicted",
    "eval.export_images": False,
    "eval.compare": None,
    "eval.compare_metric": "dsc",
    "sweep.gammas": [0.25, 0.5, 0.75, 1.0],
}
KNOWN = (
    set(DEFAULTS)
    | {f"train.{k}" for k in _TRAIN_KEYS}
    | {f"train.backbone.{k}" for k in _BACKBONE_KEYS}
    | {f"synth.{k}" for k in _SYNTH_KEYS}
)


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


class Experiment:
    """Validated experiment configuration (effective values after defaults)."""

    def __init__(self, raw: dict):
        flat = flatten(raw)
        unknown = sorted(set(flat) - KNOWN)
        if unknown:
            raise ConfigurationError(f"unknown config key: {unknown[0]}")
        self.values = {**DEFAULTS, **flat}
        has_synth = any(k.startswith("synth.") for k in flat)
        self.data_path = self.values["data.path"]
        if self.data_path is not None and has_synth:
            raise ConfigurationError("give either data.path or synth.* keys, not both")
        self.synth = self._synth() if self.data_path is None else None
        self.n_pairs = int(self.values.get("synth.n", 64))
        if self.values["eval.uncertainty"] not in UNCERTAINTY_MODES:
            raise ConfigurationError(f"eval.uncertainty must be one of {UNCERTAINTY_MODES}")
        self.train = self._train()

    @property
    def seed(self):
        return int(self.values["seed"])

    @property
    def output(self):
        return Path(self.values["output"])

    def _synth(self):
        kw = {k[6:]: v for k, v in self.values.items() if k.startswith("synth.") and k not in ("synth.n", "synth.split")}
        if "shape" in kw:
            kw["shape"] = tuple(kw["shape"])
        try:
            return SynthParams(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"synth: {exc}") from exc

    def _train(self, **override):
        kw = {k[6:]: v for k, v in self.values.items() if k.startswith("train.") and not k.startswith("train.backbone.")}
        bb = {k[15:]: v for k, v in self.values.items() if k.startswith("train.backbone.")}
        if "ndim" not in bb and self.synth is not None:
            bb["ndim"] = len(self.synth.shape)
        kw.update(override)
        try:
            return TrainConfig(
                **kw,
                seed=self.seed,
                deterministic=bool(self.values["deterministic"]),
                backbone=BackboneSpec(**bb),
            )
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def train_config(self, **override):
        return self._train(**override)

    def effective(self):
        out = {k: v for k, v in self.values.items() if not k.startswith(("train.", "synth."))}
        for k, v in self.train.to_dict().items():
            if k == "backbone":
                out.update({f"train.backbone.{bk}": bv for bk, bv in v.items()})
            elif k not in ("seed", "deterministic"):
                out[f"train.{k}"] = v
        if self.synth is not None:
            out.update({f"synth.{k}": v for k, v in self.synth.to_dict().items()})
            out["synth.n"] = self.n_pairs
            out["synth.split"] = list(self.values.get("synth.split", (0.6, 0.2, 0.2)))
        return dict(sorted(out.items()))

    def write_effective(self, directory):
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "effective_config.json").write_text(json.dumps(self.effective(), indent=1, sort_keys=True) + "\n")

    def ratios(self):
        return tuple(self.values.get("synth.split", (0.6, 0.2, 0.2)))

    def dataset(self, split):
        """``(ids, pairs)`` for one split, from disk or generated in memory."""
        if self.data_path is not None:
            _, pairs = load_dataset(self.data_path, split)
            ids = sorted(pairs)
            return ids, [pairs[i] for i in ids]
        allpairs = generate_dataset(self.synth, self.n_pairs, self.seed)
        idx = split_indices(self.n_pairs, self.seed, self.ratios())[split]
        return [f"{i:04d}" for i in idx], [allpairs[i] for i in idx]


def load_config(path, args):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output"] = args.out
    if args.deterministic:
        raw["deterministic"] = True
    return Experiment(raw)


# --- commands --------------------------------------------------------------------------


def cmd_synth(exp: Experiment):
    if exp.synth is None:
        raise ConfigurationError("synth needs synth.* parameters, not data.path")
    pairs = generate_dataset(exp.synth, exp.n_pairs, exp.seed)
    save_dataset(pairs, exp.output, seed=exp.seed, ratios=exp.ratios())
    exp.write_effective(exp.output)
    return exp.output


def cmd_train(exp: Experiment, config=None, out_dir=None):
    config = config or exp.train
    out_dir = out_dir or exp.output
    _, pairs = exp.dataset("train")
    exp.write_effective(out_dir)
    result = train(config, pairs, out_dir=out_dir)
    return result.checkpoint


def cmd_eval(exp: Experiment, checkpoint=None, out_dir=None, gamma=None):
    v = exp.values
    split = v["eval.split"]
    out_dir = out_dir or exp.output / f"eval_{split}"
    checkpoint = checkpoint or v["eval.checkpoint"] or exp.output / "checkpoint.zip"
    if exp.train.deterministic:
        set_deterministic(True)
    ckpt = load_checkpoint(checkpoint, backbone=exp.train.backbone)
    estimators, _ = restore(ckpt)
    ids, pairs = exp.dataset(split)
    report = evaluate(
        estimators, pairs, ids,
        contour=bool(v["eval.contour"]),
        sparsification=bool(v["eval.sparsification"]),
        uncertainty=v["eval.uncertainty"],
        seed=exp.seed,
    )
    write_report(report, out_dir)
    if v["eval.export_images"]:
        export_images(report, pairs, out_dir / "images", ckpt.config.gamma if gamma is None else gamma)
    if v["eval.compare"]:
        a, b = v["eval.compare"]
        t_test_report(a, b, v["eval.compare_metric"], out_dir / "ttest.csv")
    exp.write_effective(out_dir)
    return report


def cmd_sweep_gamma(exp: Experiment):
    rows = []
    for g in exp.values["sweep.gammas"]:
        cfg = exp.train_config(gamma=float(g))
        run_dir = exp.output / f"gamma_{float(g)!r}"
        ckpt = cmd_train(exp, cfg, run_dir)
        summary = cmd_eval(exp, ckpt, run_dir / f"eval_{exp.values['eval.split']}", gamma=float(g)).summary()
        rows.append([float(g)] + [summary[k] for k in ("dsc", "hd", "asd", "epe", "ause")])
    exp.write_effective(exp.output)
    path = exp.output / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "dsc", "hd", "asd", "epe", "ause"])
        for r in rows:
            w.writerow([repr(x) for x in r])
    return path


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "sweep-gamma": cmd_sweep_gamma}


def build_parser():
    p = argparse.ArgumentParser(prog="hetreg", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="flat JSON config with dotted keys")
    p.add_argument("--out", help="output directory (overrides 'output')")
    p.add_argument("--seed", type=int, help="overrides 'seed'")
    p.add_argument("--deterministic", action="store_true", help="force deterministic mode")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        exp = load_config(args.config, args)
        COMMANDS[args.command](exp)
    except ConfigurationError as exc:
        print(f"hetreg: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"hetreg: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
