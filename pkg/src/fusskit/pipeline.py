"""End-to-end open-set pipeline driven by a JSON config.

Stages run in order: load inputs, leave-one-class-out split, class model
fitting and scoring (or loading precomputed scores), superpixel
segmentation, superpixel smoothing, and the metric sweep. Every output file
is a pure function of the config and the seed.

Config schema (``"schema": "fusskit.pipeline"``, ``"version": 1``)::

    {
      "schema": "fusskit.pipeline", "version": 1,
      "seed": 0,
      "inputs": {"synthetic": {<SynthSpec fields>}}
             or {"image": ..., "gt": ..., "closed_pred": ...,
                 "features": ... and/or "scores": ...},
      "scenario": {"uuc": 4, "kuc": []},
      "scorer": {"kind": "gmm", "params": {}, "combine": "predicted",
                 "max_samples_per_class": 100000},
      "superpixels": "fuss01" | {"name": ..., "parts": [...]} | null,
      "fusion": {"min_size": 50, "stat": "mean"},
      "postprocess": {"enabled": true, "stat": "mean",
                      "apply_to": "scores_only", "quantile_threshold": 0.5},
      "metrics": {"coarse": [0.0, ..., 1.0], "fine": [0.9, ..., 1.0]},
      "max_pixels": 1048576,
      "previews": true,
      "output_dir": "out",
      "metadata": {}
    }

Relative input paths are resolved against the config file's directory.
``metadata`` is a free-form JSON object copied verbatim into the report, for
example dataset tile ids and train/test splits.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from ._validation import IGNORE, UNKNOWN, ValidationError, check_image, check_label_field, \
    check_score_map, check_segment_map, check_same_shape
from .configs import SuperpixelConfig, named_config
from .metrics import COARSE_QUANTILES, FINE_QUANTILES, kappa_sweep, loco_split, roc_auroc
from .openset import fit_class_models, open_set_score_map
from .postprocess import PostprocessParams, smooth_prediction, superpixel_smooth, \
    threshold_unknown
from .raster import is_4_connected
from .synth import SynthSpec, add_score_noise, synth_scene

SCHEMA = "fusskit.pipeline"
SCHEMA_VERSION = 1
REPORT_SCHEMA = "fusskit.report"
REPORT_VERSION = 1
SEED_ENV = "SPS_SEED"
DEFAULT_MAX_PIXELS = 1024 * 1024

_TOP_KEYS = {"schema", "version", "seed", "inputs", "scenario", "scorer", "superpixels",
             "fusion", "postprocess", "metrics", "max_pixels", "previews", "output_dir",
              "metadata"}
_FILE_INPUTS = ("image", "gt", "closed_pred", "features", "scores")


class PipelineError(RuntimeError):
    """A failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def is_validation(self) -> bool:
        return isinstance(self.cause, (ValidationError, FileNotFoundError))


def resolve_seed(flag=None, config_seed=None) -> int:
    """Flag beats config, config beats ``$SPS_SEED``, otherwise 0."""
    for value in (flag, config_seed, os.environ.get(SEED_ENV)):
        if value is None or value == "":
            continue
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ValidationError(f"seed must be an integer, got {value!r}") from None
    return 0


def _quantiles(values, name):
    try:
        return tuple(float(v) for v in values)
    except TypeError:
        raise ValidationError(f"metrics.{name} must be a list of numbers") from None


@dataclass
class PipelineConfig:
    seed: int = 0
    synthetic: SynthSpec | None = None
    files: dict = field(default_factory=dict)
    uuc: int | None = None
    kuc: tuple[int, ...] = ()
    scorer_kind: str = "gmm"
    scorer_params: dict = field(default_factory=dict)
    combine: str = "predicted"
    max_samples_per_class: int = 100_000
    superpixels: SuperpixelConfig | None = None
    fusion_min_size: int | None = None
    fusion_stat: str | None = None
    postprocess_enabled: bool = True
    postprocess: PostprocessParams = field(default_factory=PostprocessParams)
    coarse: tuple[float, ...] = COARSE_QUANTILES
    fine: tuple[float, ...] = FINE_QUANTILES
    max_pixels: int = DEFAULT_MAX_PIXELS
    previews: bool = True
    output_dir: str = "out"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.synthetic is None) == (not self.files):
            raise ValidationError("give exactly one of synthetic spec or file inputs")
        if self.files:
            unknown = set(self.files) - set(_FILE_INPUTS)
            if unknown:
                raise ValidationError(f"unknown file inputs {sorted(unknown)}")
            missing = [k for k in ("image", "gt", "closed_pred") if k not in self.files]
            if missing:
                raise ValidationError(f"file inputs missing {missing}")
            if "features" not in self.files and "scores" not in self.files:
                raise ValidationError("file inputs need features or scores")
            if self.uuc is None:
                raise ValidationError("scenario.uuc is required with file inputs")
        if self.scorer_kind not in ("gmm", "pcs"):
            raise ValidationError(f"scorer kind must be gmm or pcs, got {self.scorer_kind!r}")
        if self.max_pixels < 1:
            raise ValidationError("max_pixels must be positive")
        if self.postprocess_enabled and self.superpixels is None:
            raise ValidationError("postprocess needs a superpixel config")
        if not isinstance(self.metadata, dict):
            raise ValidationError("metadata must be a JSON object")

    @property
    def scenario_uuc(self) -> int:
        return self.synthetic.uuc if self.uuc is None else self.uuc

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".", seed=None,
                  output_dir=None) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ValidationError("pipeline config must be a JSON object")
        if doc.get("schema", SCHEMA) != SCHEMA:
            raise ValidationError(f"config schema must be {SCHEMA!r}")
        if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValidationError(f"unsupported config version {doc.get('version')}")
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        run_seed = resolve_seed(seed, doc.get("seed"))

        inputs = doc.get("inputs") or {}
        synthetic, files = None, {}
        if "synthetic" in inputs:
            if set(inputs) != {"synthetic"}:
                raise ValidationError("synthetic inputs cannot be mixed with files")
            spec_doc = dict(inputs["synthetic"])
            spec_doc.setdefault("seed", run_seed)
            synthetic = SynthSpec.from_dict(spec_doc)
        else:
            base = Path(base_dir)
            files = {k: str(base / v) for k, v in inputs.items()}

        scenario = doc.get("scenario") or {}
        scorer = doc.get("scorer") or {}
        fusion = doc.get("fusion") or {}
        post = dict(doc.get("postprocess") or {})
        enabled = bool(post.pop("enabled", True))
        metrics = doc.get("metrics") or {}

        sp = doc.get("superpixels")
        if isinstance(sp, str):
            sp = named_config(sp)
        elif isinstance(sp, dict):
            sp = SuperpixelConfig.from_dict(sp)
        elif sp is not None:
            raise ValidationError("superpixels must be a registry name, an object or null")

        uuc = scenario.get("uuc")
        return cls(
            seed=run_seed,
            synthetic=synthetic,
            files=files,
            uuc=None if uuc is None else int(uuc),
            kuc=tuple(int(c) for c in scenario.get("kuc", ())),
            scorer_kind=scorer.get("kind", "gmm"),
            scorer_params=dict(scorer.get("params", {})),
            combine=scorer.get("combine", "predicted"),
            max_samples_per_class=int(scorer.get("max_samples_per_class", 100_000)),
            superpixels=sp,
            fusion_min_size=fusion.get("min_size"),
            fusion_stat=fusion.get("stat"),
            postprocess_enabled=enabled,
            postprocess=PostprocessParams(**post),
            coarse=_quantiles(metrics.get("coarse", COARSE_QUANTILES), "coarse"),
            fine=_quantiles(metrics.get("fine", FINE_QUANTILES), "fine"),
            max_pixels=int(doc.get("max_pixels", DEFAULT_MAX_PIXELS)),
            previews=bool(doc.get("previews", True)),
            output_dir=output_dir or doc.get("output_dir", "out"),
            metadata=doc.get("metadata", {}),
        )

    @classmethod
    def load(cls, path, seed=None, output_dir=None) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, base_dir=path.parent, seed=seed, output_dir=output_dir)

    def to_dict(self) -> dict:
        """Canonical form recorded in the report (input paths as given)."""
        inputs = ({"synthetic": self.synthetic.to_dict()} if self.synthetic is not None
                  else dict(self.files))
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "seed": self.seed,
            "inputs": inputs,
            "scenario": {"uuc": self.scenario_uuc, "kuc": list(self.kuc)},
            "scorer": {"kind": self.scorer_kind, "params": self.scorer_params,
                       "combine": self.combine,
                       "max_samples_per_class": self.max_samples_per_class},
            "superpixels": None if self.superpixels is None else self.superpixels.to_dict(),
            "fusion": {"min_size": self.fusion_min_size, "stat": self.fusion_stat},
            "postprocess": {"enabled": self.postprocess_enabled,
                            "stat": self.postprocess.stat,
                            "apply_to": self.postprocess.apply_to,
                            "quantile_threshold": self.postprocess.quantile_threshold},
            "metrics": {"coarse": list(self.coarse), "fine": list(self.fine)},
            "max_pixels": self.max_pixels,
            "previews": self.previews,
            "metadata": self.metadata,
        }


class _Stage:
    """Context manager tagging exceptions with the stage they came from."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError) \
                and isinstance(exc, Exception):
            raise PipelineError(self.name, exc) from exc
        return False


def _load_inputs(cfg: PipelineConfig) -> dict:
    if cfg.synthetic is not None:
        image, gt, features, closed = synth_scene(cfg.synthetic, (cfg.scenario_uuc, *cfg.kuc))
        return {"image": image, "gt": gt, "features": features, "closed_pred": closed,
                "scores": None}
    out = {
        "image": check_image(io.load_array(cfg.files["image"], "image")),
        "gt": check_label_field(io.load_array(cfg.files["gt"], "labels"), "gt"),
        "closed_pred": check_label_field(io.load_array(cfg.files["closed_pred"], "labels"),
                                         "closed_pred"),
        "features": None,
        "scores": None,
    }
    if "features" in cfg.files:
        out["features"] = io.load_array(cfg.files["features"], "features")
    if "scores" in cfg.files:
        out["scores"] = check_score_map(io.load_array(cfg.files["scores"], "scores"))
    return out


def check_segment_invariants(seg, shape) -> np.ndarray:
    """Raise unless ``seg`` is a compact, covering, 4-connected segment map."""
    seg = check_segment_map(seg)
    if seg.shape != tuple(shape):
        raise ValidationError(f"segment map shape {seg.shape} != image shape {tuple(shape)}")
    if not is_4_connected(seg):
        raise ValidationError("segment map has a segment that is not 4-connected")
    return seg


def _roc_doc(curve) -> dict:
    return {"auroc": curve.auroc, "fpr": curve.fpr.tolist(), "tpr": curve.tpr.tolist()}


def run_pipeline(cfg: PipelineConfig, write: bool = True) -> dict:
    """Run every stage and return the report; with ``write`` also emit files."""
    with _Stage("inputs"):
        data = _load_inputs(cfg)
        image, gt, closed = data["image"], data["gt"], data["closed_pred"]
        shape = gt.shape
        check_same_shape(image[..., 0], gt, closed, names=("image", "gt", "closed_pred"))
        n_pixels = shape[0] * shape[1]
        if n_pixels > cfg.max_pixels:
            raise ValidationError(
                f"image has {n_pixels} pixels, above the cap of {cfg.max_pixels}; "
                "tiled processing of large scenes is not supported, crop the input or "
                "raise max_pixels")

    with _Stage("scenario"):
        scenario = loco_split(gt, cfg.scenario_uuc, cfg.kuc)
        gt_unknown = scenario.eval_gt == UNKNOWN

    with _Stage("scoring"):
        if data["scores"] is not None:
            raw = data["scores"]
            check_same_shape(raw, gt, names=("scores", "gt"))
        else:
            feats = data["features"]
            models = fit_class_models(feats, scenario.train_labels(gt), cfg.scorer_kind,
                                      cfg.scorer_params, cfg.seed, cfg.max_samples_per_class)
            raw = open_set_score_map(models, feats, closed, cfg.combine)
        if cfg.synthetic is not None:
            raw = add_score_noise(raw, cfg.synthetic.score_noise, cfg.synthetic.seed)

    seg = None
    if cfg.superpixels is not None:
        with _Stage("segmentation"):
            est = cfg.superpixels.build(shape, min_size=cfg.fusion_min_size,
                                        stat=cfg.fusion_stat)
            seg = check_segment_invariants(est.fit_predict(image), shape)

    with _Stage("postprocess"):
        scores, pred = raw, closed
        if cfg.postprocess_enabled:
            scores = superpixel_smooth(raw, seg, cfg.postprocess.stat)
            if cfg.postprocess.apply_to == "scores_and_prediction":
                pred = smooth_prediction(closed, seg)
        final_pred = threshold_unknown(scores, pred, cfg.postprocess.quantile_threshold)

    with _Stage("metrics"):
        valid = scenario.eval_gt != IGNORE
        baseline = roc_auroc(raw, gt_unknown, valid)
        curve = roc_auroc(scores, gt_unknown, valid) if cfg.postprocess_enabled else baseline
        coarse = kappa_sweep(scores, pred, scenario.eval_gt, cfg.coarse)
        fine = kappa_sweep(scores, pred, scenario.eval_gt, cfg.fine)
        report = {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "config": cfg.to_dict(),
            "scenario": {"uuc": scenario.uuc, "kkcs": list(scenario.kkcs),
                         "kuc": list(cfg.kuc)},
            "pixels": {"total": int(n_pixels), "unknown": int(gt_unknown.sum()),
                       "ignored": int((~valid).sum()),
                       "scored": int(np.isfinite(scores).sum())},
            "n_segments": None if seg is None else int(seg.max()) + 1,
            "auroc": curve.auroc,
            "baseline_auroc": baseline.auroc,
            "roc": _roc_doc(curve),
            "baseline_roc": _roc_doc(baseline),
            "kappa": {"coarse": coarse.as_rows(), "fine": fine.as_rows()},
        }

    if write:
        with _Stage("outputs"):
            _write_outputs(cfg, report, image, raw, scores, seg, final_pred, gt_unknown)
    return report


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def _write_outputs(cfg, report, image, raw, scores, seg, final_pred, gt_unknown) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dump_report(report))
    io.save_array(out / "scores_raw.npy", raw, "scores")
    io.save_array(out / "scores.npy", scores, "scores")
    io.save_array(out / "prediction.npy", final_pred, "labels")
    io.save_array(out / "gt_unknown.npy", gt_unknown.astype(np.int32), "labels")
    if seg is not None:
        io.save_array(out / "segments.npy", seg, "segments")
    if cfg.previews:
        io.write_ppm(out / "image.ppm", io.image_preview(image))
        io.write_ppm(out / "unknown.ppm", io.unknown_overlay(image, final_pred == UNKNOWN))
        if seg is not None:
            io.write_ppm(out / "segments.ppm", io.segment_colors(seg, cfg.seed))
