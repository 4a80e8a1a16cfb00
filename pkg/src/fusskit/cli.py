"""Command-line interface.

Exit codes: 0 on success, 2 on validation errors (bad flags, bad input
files, violated preconditions), 1 on any other runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from ._validation import IGNORE, UNKNOWN, ValidationError, check_image, check_label_field, \
    check_segment_map
from .configs import SegmenterSpec, named_config
from .fusion import FussParams, fuss
from .metrics import COARSE_QUANTILES, FINE_QUANTILES, kappa_sweep, loco_split, roc_auroc
from .openset import ClassModelSet, fit_class_models, open_set_score_map
from .pipeline import PipelineConfig, PipelineError, check_segment_invariants, \
    dump_report, resolve_seed, run_pipeline
from .postprocess import smooth_prediction, superpixel_smooth, threshold_unknown
from .raster import band_covariance
from .superpixels import ALGORITHMS
from .synth import SynthSpec, synth_scene

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _kv(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_json(path, doc) -> None:
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---- subcommands ----

def cmd_segment(args) -> int:
    img = check_image(io.load_array(args.image, "image"))
    if args.config:
        if args.algorithm or args.param:
            raise ValidationError("--config cannot be combined with --algorithm/--param")
        est = named_config(args.config).build(img.shape[:2])
    else:
        if not args.algorithm:
            raise ValidationError("give --config or --algorithm")
        params = dict(args.param or [])
        pps = params.pop("pixels_per_segment", None)
        est = SegmenterSpec(args.algorithm, params, pps).build(img.shape[:2])
    seg = check_segment_invariants(est.fit_predict(img), img.shape[:2])
    io.save_array(args.out, seg, "segments")
    if args.preview:
        io.write_ppm(args.preview, io.segment_colors(seg, args.seed or 0))
    print(f"{int(seg.max()) + 1} segments -> {args.out}")
    return EXIT_OK


def cmd_fuss(args) -> int:
    img = check_image(io.load_array(args.image, "image"))
    s1 = check_segment_map(io.load_array(args.s1, "segments"), "s1")
    s2 = check_segment_map(io.load_array(args.s2, "segments"), "s2")
    cov = None if args.epsilon is None else band_covariance(img, args.epsilon)
    seg = fuss(s1, s2, img, FussParams(args.min_size, args.stat, cov))
    seg = check_segment_invariants(seg, img.shape[:2])
    io.save_array(args.out, seg, "segments")
    if args.preview:
        io.write_ppm(args.preview, io.segment_colors(seg))
    print(f"{int(seg.max()) + 1} segments -> {args.out}")
    return EXIT_OK


def cmd_fit_models(args) -> int:
    feats = io.load_array(args.features, "features")
    labels = check_label_field(io.load_array(args.labels, "labels"), "labels")
    if args.uuc is not None:
        labels = loco_split(labels, args.uuc, args.kuc).train_labels(labels)
    params = dict(args.param or [])
    if args.n_components is not None:
        params["n_components"] = args.n_components
    seed = resolve_seed(args.seed)
    models = fit_class_models(feats, labels, args.kind, params, seed, args.max_samples)
    models.save(args.out)
    print(f"{args.kind} models for classes {models.classes} -> {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    models = ClassModelSet.load(args.models)
    feats = io.load_array(args.features, "features")
    pred = io.load_array(args.closed_pred, "labels")
    scores = open_set_score_map(models, feats, pred, args.combine)
    io.save_array(args.out, scores, "scores")
    print(f"scores -> {args.out}")
    return EXIT_OK


def cmd_postprocess(args) -> int:
    scores = io.load_array(args.scores, "scores")
    seg = check_segment_map(io.load_array(args.segments, "segments"), "segments")
    smoothed = superpixel_smooth(scores, seg, args.stat)
    io.save_array(args.out, smoothed, "scores")
    if args.closed_pred:
        pred = check_label_field(io.load_array(args.closed_pred, "labels"), "closed_pred")
        if args.apply_to == "scores_and_prediction":
            pred = smooth_prediction(pred, seg)
        if args.pred_out:
            out = pred
            if args.quantile is not None:
                out = threshold_unknown(smoothed, pred, args.quantile)
            io.save_array(args.pred_out, out, "labels")
            if args.overlay and args.image:
                io.write_ppm(args.overlay, io.unknown_overlay(
                    io.load_array(args.image, "image"), out == UNKNOWN))
    elif args.pred_out:
        raise ValidationError("--pred-out needs --closed-pred")
    print(f"smoothed scores -> {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    scores = io.load_array(args.scores, "scores")
    gt = check_label_field(io.load_array(args.gt, "labels"), "gt")
    pred = io.load_array(args.closed_pred, "labels")
    if args.uuc is not None:
        gt = loco_split(gt, args.uuc, args.kuc).eval_gt
    valid = gt != IGNORE
    curve = roc_auroc(scores, gt == UNKNOWN, valid)
    coarse = kappa_sweep(scores, pred, gt, args.coarse)
    fine = kappa_sweep(scores, pred, gt, args.fine)
    doc = {"auroc": curve.auroc, "roc": {"fpr": curve.fpr.tolist(), "tpr": curve.tpr.tolist()},
           "kappa": {"coarse": coarse.as_rows(), "fine": fine.as_rows()},
           "pixels": {"total": int(gt.size), "unknown": int((gt == UNKNOWN).sum()),
                      "ignored": int((~valid).sum()),
                      "scored": int(np.isfinite(scores).sum())}}
    _write_json(args.out, doc)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["grid", "quantile", "kappa"])
            for grid, table in (("coarse", coarse), ("fine", fine)):
                for q, k in zip(table.thresholds, table.kappas):
                    w.writerow([grid, repr(q), repr(k)])
    if args.out not in (None, "-"):
        print(f"AUROC {curve.auroc:.6f} -> {args.out}")
    return EXIT_OK


_SYNTH_SCALARS = [f for f in fields(SynthSpec) if f.name not in ("band_means", "feature_means")]


def cmd_synth(args) -> int:
    doc = {f.name: getattr(args, f.name) for f in _SYNTH_SCALARS
           if getattr(args, f.name) is not None}
    doc["seed"] = resolve_seed(args.seed)
    spec = SynthSpec.from_dict(doc)
    image, gt, features, closed = synth_scene(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_array(out / "image.npy", image, "image")
    io.save_array(out / "gt.npy", gt, "labels")
    io.save_array(out / "features.npy", features, "features")
    io.save_array(out / "closed_pred.npy", closed, "labels")
    _write_json(out / "spec.json", spec.to_dict())
    if args.preview:
        io.write_ppm(out / "image.ppm", io.image_preview(image))
    print(f"scene {spec.height}x{spec.width}, {spec.n_classes} classes -> {out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig.load(args.config, seed=args.seed, output_dir=args.out_dir)
    report = run_pipeline(cfg, write=not args.dry_run)
    if args.dry_run:
        sys.stdout.write(dump_report(report))
    else:
        print(f"AUROC {report['auroc']:.6f} (baseline {report['baseline_auroc']:.6f}) "
              f"-> {cfg.output_dir}")
    return EXIT_OK


# ---- parser ----

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusskit", description="Superpixel post-processing for open-set "
                                             "semantic segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("segment", help="superpixel segmentation of an image")
    s.add_argument("--image", required=True)
    s.add_argument("--config", help="registry name, e.g. single01 or fuss01")
    s.add_argument("--algorithm", choices=sorted(ALGORITHMS))
    s.add_argument("--param", type=_kv, action="append", metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.add_argument("--preview")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("fuss", help="fuse two segmentations")
    s.add_argument("--image", required=True)
    s.add_argument("--seg-a", "--s1", dest="s1", required=True)
    s.add_argument("--seg-b", "--s2", dest="s2", required=True)
    s.add_argument("--min-size", type=int, default=50)
    s.add_argument("--stat", choices=("mean", "median"), default="mean")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--preview")
    s.set_defaults(func=cmd_fuss)

    s = sub.add_parser("fit-models", help="fit per-class density models")
    s.add_argument("--features", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--uuc", type=int, help="hold this class out before fitting")
    s.add_argument("--kuc", type=_ints, default=())
    s.add_argument("--kind", choices=("gmm", "pcs"), default="gmm")
    s.add_argument("--n-components", type=int)
    s.add_argument("--param", type=_kv, action="append", metavar="KEY=VALUE")
    s.add_argument("--max-samples", type=int, default=100_000)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_models)

    s = sub.add_parser("score", help="open-set score map from fitted models")
    s.add_argument("--models", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--closed-pred", required=True)
    s.add_argument("--combine", choices=("predicted", "max"), default="predicted")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("postprocess", help="superpixel smoothing and thresholding")
    s.add_argument("--scores", required=True)
    s.add_argument("--segments", required=True)
    s.add_argument("--stat", choices=("mean", "median"), default="mean")
    s.add_argument("--apply-to", choices=("scores_only", "scores_and_prediction"),
                   default="scores_only")
    s.add_argument("--pred", "--closed-pred", dest="closed_pred")
    s.add_argument("--quantile", type=float)
    s.add_argument("--pred-out")
    s.add_argument("--image", help="image for the unknown overlay preview")
    s.add_argument("--overlay")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("metrics", help="AUROC and kappa sweeps")
    s.add_argument("--scores", required=True)
    s.add_argument("--closed-pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--uuc", type=int, help="relabel this gt class as UNKNOWN")
    s.add_argument("--kuc", type=_ints, default=())
    s.add_argument("--coarse", type=_floats, default=COARSE_QUANTILES)
    s.add_argument("--fine", type=_floats, default=FINE_QUANTILES)
    s.add_argument("--out", default="-")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    for f in _SYNTH_SCALARS:
        s.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default))
    s.add_argument("--out-dir", required=True)
    s.add_argument("--preview", action="store_true")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="run the full pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, help="overrides the config seed and $SPS_SEED")
    s.add_argument("--out-dir")
    s.add_argument("--dry-run", action="store_true", help="print the report, write nothing")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"fusskit {args.command}: error in stage {exc}", file=sys.stderr)
        return EXIT_VALIDATION if exc.is_validation else EXIT_RUNTIME
    except (ValidationError, FileNotFoundError) as exc:
        print(f"fusskit {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"fusskit {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
