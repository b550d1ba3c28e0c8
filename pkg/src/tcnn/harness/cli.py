"""Command line entry point: ``tcnn <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .. import CLASSES, baselines
from ..model import TCNN, export_activations, param_table
from ..pipeline import load_gray, save_gray, slice_patches, to_tensor, unfold_log_polar, upscale_bicubic
from . import plotting
from .config import dump_config, load_config
from .data import PatchDataset, PatchRecord, read_manifest, write_manifest
from .evaluate import evaluate, majority_vote
from .experiment import (
    load_model_dir, run_cv, run_experiment, write_confusion, write_rows,
)
from .splits import folds_from_tags, make_folds, make_holdout, split_from_tags, tag_folds, tag_records
from .synth import synth_dataset

log = logging.getLogger("tcnn")


def _dtype(args):
    return np.float64 if args.precision == "f64" else np.float32


def _out(args, *parts):
    path = Path(args.out_dir, *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(records, manifest_path, cfg):
    return PatchDataset.from_manifest(records, Path(manifest_path).parent, cfg.pipeline.target)


# ------------------------------------------------------------------ subcommands


def cmd_params(args, cfg):
    rows = param_table(cfg.arch)
    total = sum(c for _, c in rows)
    print(f"{'layer':<8}{'parameters':>12}")
    for name, count in rows:
        print(f"{name:<8}{count:>12,}")
    print(f"{'total':<8}{total:>12,}")
    return 0


def cmd_config(args, cfg):
    sys.stdout.write(dump_config(cfg))
    return 0


def cmd_synth(args, cfg):
    if args.images_per_class is not None:
        cfg.synth.images_per_class = args.images_per_class
    records = synth_dataset(cfg.synth, args.out_dir, cfg.pipeline.window, cfg.pipeline.overlap)
    print(f"{len(records)} patches from {len({r.source_id for r in records})} images -> "
          f"{Path(args.out_dir) / 'manifest.jsonl'}")
    return 0


def cmd_unfold(args, cfg):
    out = _out(args)
    for path in args.images:
        flat = unfold_log_polar(load_gray(path), cfg.pipeline.geometry)
        target = out / f"{Path(path).stem}_unfolded.png"
        save_gray(target, flat)
        print(f"{path} -> {target} ({flat.shape[0]}x{flat.shape[1]})")
    return 0


def cmd_slice(args, cfg):
    out = _out(args)
    (out / "patches").mkdir(exist_ok=True)
    records = []
    for path in args.images:
        stem = Path(path).stem
        ps = slice_patches(load_gray(path), cfg.pipeline.window, cfg.pipeline.overlap)
        for idx, patch in enumerate(ps.patches):
            rel = f"patches/{stem}_p{idx}.png"
            save_gray(out / rel, patch)
            records.append(PatchRecord(rel, args.label, stem, idx))
    write_manifest(out / "manifest.jsonl", records)
    print(f"{len(records)} patches -> {out / 'manifest.jsonl'}")
    return 0


def cmd_split(args, cfg):
    records = read_manifest(args.manifest)
    mode = args.mode or cfg.split.mode
    cfg.split.mode = mode
    if mode == "cv":
        folds, _ = make_folds(records, cfg.split)
        tagged = tag_folds(records, folds)
    else:
        tagged = tag_records(records, make_holdout(records, cfg.split))
    # stays next to the patches so relative paths resolve
    target = Path(args.manifest).with_name(f"manifest_{mode}.jsonl")
    write_manifest(target, tagged)
    counts = {}
    for r in tagged:
        counts[r.split] = counts.get(r.split, 0) + 1
    for tag in sorted(counts):
        print(f"{tag:<12}{counts[tag]:>6} patches  {100 * counts[tag] / len(tagged):6.1f}%")
    print(f"-> {target}")
    return 0


def _holdout_split(records, cfg):
    if all(r.split in ("train", "validation", "test") for r in records):
        return split_from_tags(records, "holdout")
    return make_holdout(records, cfg.split)


def cmd_train(args, cfg):
    if args.max_epochs is not None:
        cfg.train.max_epochs = args.max_epochs
    records = read_manifest(args.manifest)
    dataset = _dataset(records, args.manifest, cfg)
    split = _holdout_split(records, cfg)
    out = _out(args, "holdout")
    exp = run_experiment(dataset, split, cfg.arch, cfg.train, out, dtype=_dtype(args))
    sys.stdout.write((out / "report.txt").read_text())
    print(f"test accuracy (image vote): {100 * exp.image_metrics['test'].accuracy:.2f}%")
    print(f"-> {out}")
    return 0


def cmd_cv(args, cfg):
    if args.max_epochs is not None:
        cfg.train.max_epochs = args.max_epochs
    records = read_manifest(args.manifest)
    dataset = _dataset(records, args.manifest, cfg)
    if all(r.split and r.split.startswith("fold") for r in records):
        folds, splits = folds_from_tags(records)
    else:
        cfg.split.mode = "cv"
        folds, splits = make_folds(records, cfg.split)
    out = _out(args, "cv")
    run_cv(dataset, folds, splits, cfg.arch, cfg.train, out, dtype=_dtype(args))
    sys.stdout.write((out / "cv_report.txt").read_text())
    print(f"-> {out}")
    return 0


def cmd_eval(args, cfg):
    model, std = load_model_dir(args.model, dtype=_dtype(args))
    records = read_manifest(args.manifest)
    if args.split:
        records = [r for r in records if r.split == args.split]
        if not records:
            raise SystemExit(f"no records tagged {args.split!r}")
    dataset = PatchDataset.from_manifest(records, Path(args.manifest).parent, model.config.input_size)
    m = evaluate(model, dataset, std, args.aggregation)
    out = _out(args)
    name = args.split or "all"
    write_rows(out / f"eval_{name}_{args.aggregation}.csv",
               [[name, args.aggregation, f"{m.accuracy:.6f}",
                 "" if m.loss is None else f"{m.loss:.6f}", "" if m.mse is None else f"{m.mse:.6f}"]])
    write_confusion(out / f"eval_{name}_{args.aggregation}_confusion.csv", m.confusion)
    plotting.plot_confusion(m.confusion, out / f"eval_{name}_{args.aggregation}_confusion.png")
    print(f"{args.aggregation}-level accuracy on {name}: {100 * m.accuracy:.2f}% ({m.count} samples)")
    print(m.confusion)
    return 0


def cmd_infer(args, cfg):
    model, std = load_model_dir(args.model, dtype=_dtype(args))
    size = model.config.input_size
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["image", "prediction"] + [f"p_{c}" for c in CLASSES])
    for path in args.images:
        img = load_gray(path)
        if img.shape[1] > img.shape[0]:
            patches = slice_patches(img, img.shape[0], cfg.pipeline.overlap).patches
        else:
            patches = [img]
        x = to_tensor([upscale_bicubic(p, size) for p in patches], dtype=model.dtype.type)
        if std is not None:
            x = std.apply(x)
        probs = model.predict_proba(x)
        _, voted = majority_vote(probs.argmax(axis=1), [path] * len(patches))
        mean = probs.mean(axis=0)
        writer.writerow([path, CLASSES[voted[0]]] + [f"{p:.4f}" for p in mean])
    return 0


def _features_for(records, root, cfg):
    return [baselines.extract_features(load_gray(Path(root) / r.path), cfg.baseline.lpq, cfg.baseline.glcm)
            for r in records]


def cmd_features(args, cfg):
    records = read_manifest(args.manifest)
    feats = _features_for(records, Path(args.manifest).parent, cfg)
    out = _out(args)
    target = out / "features.csv"
    baselines.write_feature_csv(target, feats, [r.label for r in records])
    print(f"{len(feats)} x {len(feats[0].values)} features -> {target}")
    return 0


def cmd_baseline_train(args, cfg):
    records = read_manifest(args.manifest)
    if args.features:
        x, labels = baselines.read_feature_csv(args.features)
        if labels != [r.label for r in records]:
            raise SystemExit("feature rows do not line up with the manifest")
    else:
        x = np.array([f.values for f in _features_for(records, Path(args.manifest).parent, cfg)])
    y = np.array([CLASSES.index(r.label) for r in records])
    split = _holdout_split(records, cfg)
    fit_ids = set(split.train) | set(split.validation)
    test_ids = set(split.test)
    fit_mask = np.array([r.source_id in fit_ids for r in records])
    test_mask = np.array([r.source_id in test_ids for r in records])
    model = baselines.train_linear(x[fit_mask], y[fit_mask], cfg.baseline.linear, n_classes=len(CLASSES))
    rows = []
    out = _out(args, "baseline")
    for stage, mask in (("train", fit_mask), ("test", test_mask)):
        pred = baselines.predict_linear(model, x[mask])
        from .evaluate import metrics_from_predictions
        m = metrics_from_predictions(y[mask], pred, len(CLASSES))
        rows.append(["baseline", stage, f"{m.accuracy:.6f}", "", ""])
        write_confusion(out / f"confusion_{stage}.csv", m.confusion)
        print(f"LPQ+HD linear baseline, {stage}: {100 * m.accuracy:.2f}%")
    write_rows(out / "report.csv", rows)
    write_rows(out / "loss_history.csv", [[k + 1, f"{v:.8f}"] for k, v in enumerate(model.history)],
               header=("epoch", "loss"))
    print(f"-> {out}")
    return 0


def cmd_activations(args, cfg):
    model, std = load_model_dir(args.model, dtype=_dtype(args)) if args.model else (
        TCNN(cfg.arch, seed=cfg.train.seed, dtype=_dtype(args)), None)
    img = load_gray(args.image)
    size = model.config.input_size
    if img.shape != (size, size):
        if img.shape[1] > img.shape[0]:
            img = slice_patches(img, img.shape[0], cfg.pipeline.overlap).patches[0]
        img = upscale_bicubic(img, size)
    x = to_tensor([img], dtype=model.dtype.type)
    if std is not None:
        x = std.apply(x)
    out = _out(args, "activations")
    for layer in args.layer:
        maps = export_activations(model, x, layer)
        for k, m in enumerate(maps):
            save_gray(out / f"{layer}_{k:02d}.{args.format}", m)
        plotting.plot_activation_grid(maps, out / f"{layer}_grid.png",
                                      title=f"{layer} ({maps[0].shape[0]}x{maps[0].shape[1]})")
        print(f"{layer}: {len(maps)} maps of {maps[0].shape[0]}x{maps[0].shape[1]} -> {out}")
    return 0


# ------------------------------------------------------------------ parser


def _common(suppress=False):
    # subcommands repeat the global flags without defaults so values given
    # before the subcommand are not reset
    kw = {"argument_default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False, **kw)
    d = (lambda v: {}) if suppress else (lambda v: {"default": v})
    common.add_argument("--config", help="INI file with arch/train/pipeline/synth/split sections")
    common.add_argument("--seed", type=int, help="seed for synthesis, splits, init and augmentation")
    common.add_argument("--threads", type=int, help="BLAS threads (1 for bit-exact reruns)", **d(None))
    common.add_argument("--precision", choices=("f32", "f64"), **d("f32"))
    common.add_argument("--out-dir", **d("out"))
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable", **d([]))
    common.add_argument("-v", "--verbose", action="store_true", **d(False))
    return common


def build_parser():
    common = _common()
    sub_common = _common(suppress=True)

    parser = argparse.ArgumentParser(prog="tcnn", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, parents=[sub_common])
        p.set_defaults(func=func)
        return p

    add("params", cmd_params, "print the per-layer parameter table")
    add("config", cmd_config, "print the effective configuration as INI")
    p = add("synth", cmd_synth, "generate the synthetic corrosion dataset")
    p.add_argument("--images-per-class", type=int)
    p = add("unfold", cmd_unfold, "log-polar unfold bore images")
    p.add_argument("images", nargs="+")
    p = add("slice", cmd_slice, "cut unfolded images into overlapping square patches")
    p.add_argument("images", nargs="+")
    p.add_argument("--label", required=True, choices=CLASSES)
    p = add("split", cmd_split, "tag a manifest with hold-out or 3-fold assignments")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=("holdout", "cv"))
    p = add("train", cmd_train, "hold-out experiment")
    p.add_argument("manifest")
    p.add_argument("--max-epochs", type=int)
    p = add("cv", cmd_cv, "3-fold cross-validation experiment")
    p.add_argument("manifest")
    p.add_argument("--max-epochs", type=int)
    p = add("eval", cmd_eval, "score a trained model on a manifest")
    p.add_argument("model", help="directory holding weights.tcnw and model.json")
    p.add_argument("manifest")
    p.add_argument("--split", help="only records with this split tag")
    p.add_argument("--aggregation", choices=("patch", "image"), default="patch")
    p = add("infer", cmd_infer, "classify images (strips are sliced and majority-voted)")
    p.add_argument("model")
    p.add_argument("images", nargs="+")
    p = add("features", cmd_features, "export LPQ + Haralick features as CSV")
    p.add_argument("manifest")
    p = add("baseline-train", cmd_baseline_train, "train and score the handcrafted-feature baseline")
    p.add_argument("manifest")
    p.add_argument("--features", help="CSV from 'features' (rows in manifest order)")
    p = add("activations", cmd_activations, "export conv1/conv2 activation maps as images")
    p.add_argument("image")
    p.add_argument("--model", help="trained model directory (default: freshly initialised)")
    p.add_argument("--layer", action="append", choices=("conv1", "conv2"))
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if getattr(args, "layer", None) is None and args.command == "activations":
        args.layer = ["conv1", "conv2"]
    with threadpool_limits(limits=args.threads):
        return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
