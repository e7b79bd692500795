"""Batch command line: train, predict, evaluate, ablate, inspect (plus synth).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import boosting as B
from . import csc, metrics
from . import io as sio
from . import pipeline as P
from .errors import ConfigError, ManifestError, ScD2TEError

log = logging.getLogger("scd2te")


class UsageError(Exception):
    """Bad invocation: missing inputs, unknown keys; exits with code 2."""


# -- run config -----------------------------------------------------------------

def _ints(v: str) -> tuple:
    return tuple(int(p) for p in v.replace(" ", "").split(",") if p)


def _mode(choices):
    def parse(v: str) -> str:
        if v not in choices:
            raise ValueError(f"expected one of {', '.join(choices)}")
        return v
    return parse


# key -> (section, field, parser); section None = ModelConfig
KEYS = {
    "preset": (None, None, _mode(("full", "desk"))),
    "layer_count": (None, "layer_count", int),
    "filter_sides": (None, "filter_sides", _ints),
    "atom_counts": (None, "atom_counts", _ints),
    "compressed_channels": (None, "compressed_channels", _ints),
    "context_radii": (None, "context_offsets", lambda v: tuple(csc.compass_offsets(_ints(v)))),
    "samples_per_layer": (None, "samples_per_layer", int),
    "threshold": (None, "threshold", float),
    "color_mode": (None, "color_mode", _mode(P.COLOR_MODES)),
    "reuse_mode": (None, "reuse_mode", _mode(P.REUSE_MODES)),
    "seed": (None, "seed", int),
    "output_dir": ("run", "output_dir", str),
    "tree_count": ("ensemble", "tree_count", int),
    "xi": ("ensemble", "xi", float),
    "zeta": ("ensemble", "zeta", float),
    "max_depth": ("ensemble", "max_depth", int),
    "subsample_ratio": ("ensemble", "subsample_ratio", float),
    "min_samples_leaf": ("ensemble", "min_samples_leaf", int),
    "ensemble_mode": ("ensemble", "mode", _mode((B.ADDITIVE, B.AVERAGED))),
    "lambda": ("sparse", "lam", float),
    "max_inner_iters": ("sparse", "max_inner_iters", int),
    "tol": ("sparse", "tol", float),
    "sparsity_ceiling": ("sparse", "sparsity_ceiling", float),
    "dict_epochs": ("sparse", "dict_epochs", int),
    "patches_per_epoch": ("sparse", "patches_per_epoch", int),
    "step_size": ("sparse", "step_size", float),
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: P.ModelConfig
    output_dir: str = "."


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` comments; unknown or repeated keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: repeated key {key!r}")
        try:
            values[key] = KEYS[key][2](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return values


def build_run_config(values: dict, seed: int | None = None) -> RunConfig:
    values = dict(values)
    preset = values.pop("preset", "full")
    base = P.ModelConfig.desk() if preset == "desk" else P.ModelConfig()
    top, sections = {}, {"ensemble": {}, "sparse": {}, "run": {}}
    for key, value in values.items():
        section, name, _ = KEYS[key]
        (top if section is None else sections[section])[name] = value
    if seed is not None:
        top["seed"] = seed
    try:
        cfg = dataclasses.replace(
            base,
            ensemble=dataclasses.replace(base.ensemble, **sections["ensemble"]),
            sparse=dataclasses.replace(base.sparse, **sections["sparse"]),
            **top)
    except ScD2TEError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(cfg, sections["run"].get("output_dir", "."))


def load_run_config(path, seed: int | None = None) -> RunConfig:
    if path is None:
        return build_run_config({}, seed)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return build_run_config(parse_config_text(text, str(path)), seed)


# -- helpers --------------------------------------------------------------------

def _need_file(path, what: str):
    if path is None or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _manifest(path):
    _need_file(path, "manifest")
    try:
        return sio.load_manifest(path)
    except ManifestError as exc:
        raise UsageError(str(exc)) from None


def _pairs(entries, color_mode):
    out = []
    for e in entries:
        if e.mask_path is None:
            raise ManifestError(f"{e.image_path}: entry has no mask")
        out.append((sio.load_image(e.image_path, color_mode), sio.load_mask(e.mask_path)))
    return out


def _test_entries(manifest):
    entries = manifest.split("same_test", "different_test")
    return entries or manifest.split("validation")


def _resolve(out: str, run: RunConfig) -> str:
    p = Path(out)
    return str(p if p.is_absolute() else Path(run.output_dir) / p)


# -- commands -------------------------------------------------------------------

def cmd_train(args) -> int:
    manifest = _manifest(args.manifest)
    run = load_run_config(args.config, args.seed)
    entries = manifest.split("train")
    if not entries:
        raise UsageError("manifest has no train entries")
    dataset = _pairs(entries, run.model.color_mode)
    reports = []
    model = P.train(dataset, run.model, threads=args.threads, on_layer=reports.append)
    out = _resolve(args.out, run)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    sio.save_model(model, out)
    log_path = args.log or out + ".log.csv"
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "time_s", "train_f1"])
        for r in reports:
            w.writerow([r.layer, f"{r.time_s:.3f}", repr(r.train_f1)])
    for r in reports:
        print(f"layer {r.layer}: {r.time_s:.1f}s train F1 {r.train_f1:.4f}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    _need_file(args.model, "model file")
    _need_file(args.image, "image")
    model = sio.load_model(args.model)
    image = sio.load_image(args.image, model.config.color_mode)
    score, mask = P.predict_image(model, image)
    sio.save_pgm(args.out_score, sio.to_uint8(score))
    sio.save_pgm(args.out_mask, mask * np.uint8(255))
    if args.out_raw:
        np.save(args.out_raw, score)
    return 0


def evaluate_manifest(model, manifest, threads: int = 1) -> metrics.MetricsReport:
    entries = _test_entries(manifest)
    if not entries:
        raise ManifestError("manifest has no test entries")
    pairs = _pairs(entries, model.config.color_mode)
    preds = P._pmap(lambda p: P.predict_image(model, p[0])[1], pairs, threads)
    rows = [metrics.evaluate_pair(pred, mask, Path(e.image_path).name, e.organ)
            for e, pred, (_, mask) in zip(entries, preds, pairs)]
    return metrics.MetricsReport.from_rows(rows, [e.split for e in entries])


def cmd_evaluate(args) -> int:
    _need_file(args.model, "model file")
    manifest = _manifest(args.manifest)
    model = sio.load_model(args.model)
    report = evaluate_manifest(model, manifest, args.threads)
    Path(args.out).write_text(report.to_csv())
    return 0


def cmd_ablate(args) -> int:
    manifest = _manifest(args.manifest)
    run = load_run_config(args.config, args.seed)
    cfg = run.model
    train_set = _pairs(manifest.split("train"), cfg.color_mode)
    test_set = _pairs(_test_entries(manifest), cfg.color_mode)
    if not train_set or not test_set:
        raise UsageError("ablation needs train and test entries")
    rows = P.train_ablation(train_set, cfg, test_set, threads=args.threads)
    out = _resolve(args.out, run)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "layer", "time_s", "f1"])
        for r in rows:
            w.writerow([r.mode, r.layer, f"{r.time_s:.3f}", repr(r.f1)])
    return 0


def model_summary(model: P.ScD2TEModel) -> str:
    lines = [f"format_version {model.format_version}", f"layers {len(model.layers)}",
             f"reuse_mode {model.config.reuse_mode}"]
    for layer in model.layers:
        leaves = [t.leaf_count for t in layer.ensemble.trees]
        depths = [t.depth() for t in layer.ensemble.trees]
        lines.append(
            f"layer {layer.index}: filter_side {layer.dictionary.filter_side} "
            f"atoms {layer.dictionary.atom_count} pool_width {layer.compressor.in_channels} "
            f"compressed {layer.compressor.out_channels} trees {len(leaves)} "
            f"leaves min/mean/max {min(leaves, default=0)}/"
            f"{np.mean(leaves) if leaves else 0:.2f}/{max(leaves, default=0)} "
            f"max_depth {max(depths, default=0)} mode {layer.ensemble.mode}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    _need_file(args.model, "model file")
    model = sio.load_model(args.model)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for layer in model.layers:
        sio.save_pgm(out / f"layer{layer.index}_dictionary.pgm",
                     csc.dictionary_montage(layer.dictionary))
    (out / "summary.txt").write_text(model_summary(model))
    return 0


def cmd_synth(args) -> int:
    from PIL import Image
    from .synthetic import nuclei_corpus
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = nuclei_corpus(args.seed if args.seed is not None else 42,
                                args.train, args.test, args.size)
    lines = []
    for split, pairs in (("train", train), ("same_test", test)):
        for k, (x, m) in enumerate(pairs):
            name = f"{split}_{k:02d}"
            Image.fromarray(np.round(x * 255).astype(np.uint8)).save(out / f"{name}.png")
            sio.save_pgm(out / f"{name}_mask.pgm", m * np.uint8(255))
            lines.append(f"{split},synthetic,{name}.png,{name}_mask.pgm")
    (out / "manifest.csv").write_text("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scd2te", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--seed", type=int, default=None,
                       help="overrides the config seed (default 42)")
        if config:
            p.add_argument("--config", default=None, help="key = value run config")

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="training log CSV (default OUT.log.csv)")
    common(p, config=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score map and mask for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-score", required=True)
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-raw", default=None, help="raw float scores as .npy")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics CSV over test entries")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="per-layer F1 for each feature reuse mode")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    common(p, config=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dictionary montages and a text summary")
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write the synthetic nuclei corpus and manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--size", type=int, default=200)
    common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"scd2te: error: {exc}", file=sys.stderr)
        return 2
    except (ScD2TEError, OSError) as exc:
        print(f"scd2te: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
