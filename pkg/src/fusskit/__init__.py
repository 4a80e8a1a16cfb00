"""Superpixel segmentation, segmentation fusion and superpixel post-processing
of open-set semantic segmentation scores."""
from __future__ import annotations

from ._validation import IGNORE, UNKNOWN, ValidationError
from .configs import REGISTRY, SegmenterSpec, SuperpixelConfig, named_config
from .fusion import FussParams, FussSegmenter, join_segmentations, mahalanobis_distance, \
    merge_small_segments, fuss
from .metrics import KappaTable, LocoScenario, RocCurve, cohen_kappa, kappa_sweep, \
    loco_split, roc_auroc
from .openset import ClassModelSet, GaussianMixtureDensity, OpenSetScorer, PCSDensity, \
    fit_class_models, fit_gmm, fit_pcs, gmm_log_likelihood, open_set_score_map, \
    pcs_log_likelihood
from .pipeline import PipelineConfig, PipelineError, run_pipeline
from .postprocess import SuperpixelSmoother, UnknownThresholder, smooth_prediction, \
    superpixel_smooth, threshold_unknown
from .raster import CovarianceMatrix, SegmentStats, band_covariance, connected_components, \
    gaussian_smooth, segment_stats
from .superpixels import FelzenszwalbSegmenter, QuickshiftSegmenter, SlicSegmenter, \
    felzenszwalb, quickshift, slic
from .synth import SynthSpec, synth_scene

__version__ = "0.1.0"

__all__ = [
    "IGNORE", "UNKNOWN", "ValidationError",
    "REGISTRY", "SegmenterSpec", "SuperpixelConfig", "named_config",
    "FussParams", "FussSegmenter", "join_segmentations", "mahalanobis_distance",
    "merge_small_segments", "fuss",
    "KappaTable", "LocoScenario", "RocCurve", "cohen_kappa", "kappa_sweep", "loco_split",
    "roc_auroc",
    "ClassModelSet", "GaussianMixtureDensity", "OpenSetScorer", "PCSDensity",
    "fit_class_models", "fit_gmm", "fit_pcs", "gmm_log_likelihood", "open_set_score_map",
    "pcs_log_likelihood",
    "PipelineConfig", "PipelineError", "run_pipeline",
    "SuperpixelSmoother", "UnknownThresholder", "smooth_prediction", "superpixel_smooth",
    "threshold_unknown",
    "CovarianceMatrix", "SegmentStats", "band_covariance", "connected_components",
    "gaussian_smooth", "segment_stats",
    "FelzenszwalbSegmenter", "QuickshiftSegmenter", "SlicSegmenter", "felzenszwalb",
    "quickshift", "slic",
    "SynthSpec", "synth_scene",
]
