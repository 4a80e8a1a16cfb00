"""Superpixel post-processing of open-set scores and predictions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    UNKNOWN,
    ValidationError,
    check_label_field,
    check_real,
    check_same_shape,
    check_score_map,
    check_segment_map,
    check_stat,
)
from .raster import lower_median_by_label


@dataclass(frozen=True)
class PostprocessParams:
    stat: str = "mean"
    apply_to: str = "scores_only"
    quantile_threshold: float = 0.5

    def __post_init__(self):
        check_stat(self.stat)
        if self.apply_to not in ("scores_only", "scores_and_prediction"):
            raise ValidationError(f"apply_to must be scores_only or scores_and_prediction, "
                                  f"got {self.apply_to!r}")
        check_real(self.quantile_threshold, "quantile_threshold", low=0.0, high=1.0)


def superpixel_smooth(scores, seg, stat: str = "mean") -> np.ndarray:
    """Give every pixel the mean (or lower median) score of its segment.

    ``-inf`` sentinel pixels are left untouched and do not enter the
    statistic. The segment value is clipped to the segment's score range, so
    a constant segment keeps its value bit-exactly.
    """
    scores = check_score_map(scores)
    seg = check_segment_map(seg)
    check_stat(stat)
    check_same_shape(scores, seg, names=("scores", "seg"))
    flat = scores.ravel()
    lab = seg.ravel()
    valid = np.isfinite(flat)
    k = int(lab.max()) + 1
    v_lab = lab[valid]
    v_val = flat[valid]
    counts = np.bincount(v_lab, minlength=k)
    empty = counts == 0
    if empty.any():
        warnings.warn(f"{int(empty.sum())} segment(s) contain only sentinel scores; "
                      "left unchanged", stacklevel=2)

    present = np.flatnonzero(~empty)
    if stat == "mean":
        sums = np.bincount(v_lab, weights=v_val, minlength=k)
        value = np.zeros(k)
        value[present] = sums[present] / counts[present]
        lo = np.full(k, np.inf)
        hi = np.full(k, -np.inf)
        np.minimum.at(lo, v_lab, v_val)
        np.maximum.at(hi, v_lab, v_val)
        value[present] = np.clip(value[present], lo[present], hi[present])
    else:
        # compact the present segments so the median helper sees ids 0..n-1
        remap = np.full(k, -1)
        remap[present] = np.arange(present.size)
        med = lower_median_by_label(v_val, remap[v_lab], counts[present])
        value = np.zeros(k)
        value[present] = med

    out = flat.copy()
    out[valid] = value[v_lab]
    return out.reshape(scores.shape)


def smooth_prediction(pred, seg) -> np.ndarray:
    """Majority class per segment (ties to the smaller class id).

    Sentinel-labelled pixels neither vote nor change.
    """
    pred = check_label_field(pred, "pred")
    seg = check_segment_map(seg)
    check_same_shape(pred, seg, names=("pred", "seg"))
    flat = pred.ravel()
    lab = seg.ravel()
    valid = flat >= 0
    if not valid.any():
        return pred.copy()
    n_cls = int(flat[valid].max()) + 1
    k = int(lab.max()) + 1
    hist = np.zeros((k, n_cls), dtype=np.int64)
    np.add.at(hist, (lab[valid], flat[valid]), 1)
    majority = np.argmax(hist, axis=1)  # argmax returns the first (smallest) id on ties
    out = flat.copy()
    out[valid] = majority[lab[valid]]
    return out.reshape(pred.shape)


def score_threshold(scores, quantile: float) -> float:
    """Linear-interpolated empirical quantile of the finite scores."""
    scores = check_score_map(scores)
    q = check_real(quantile, "quantile", low=0.0, high=1.0)
    valid = scores[np.isfinite(scores)]
    if valid.size == 0:
        raise ValidationError("no valid (finite) scores to threshold")
    return float(np.quantile(valid, q, method="linear"))


def threshold_unknown(scores, closed_pred, quantile: float) -> np.ndarray:
    """Relabel pixels scoring below the ``quantile`` threshold as UNKNOWN.

    The comparison is strict, so quantile 0 marks nothing; quantile 1 marks
    every finite-score pixel.
    """
    scores = check_score_map(scores)
    pred = check_label_field(closed_pred, "closed_pred")
    check_same_shape(scores, pred, names=("scores", "closed_pred"))
    t = score_threshold(scores, quantile)
    finite = np.isfinite(scores)
    unknown = finite & (scores < t) if quantile < 1.0 else finite
    out = pred.copy()
    out[unknown] = UNKNOWN
    return out


class SuperpixelSmoother(TransformerMixin, BaseEstimator):
    """Project score maps onto a fixed segmentation.

    ``fit(segments)`` stores the segmentation; ``transform(scores)`` returns
    the per-segment mean/median score map; ``smooth_prediction(pred)``
    applies the majority vote to a closed-set prediction.
    """

    def __init__(self, stat="mean", apply_to="scores_only"):
        self.stat = stat
        self.apply_to = apply_to

    def fit(self, X, y=None):
        PostprocessParams(self.stat, self.apply_to)
        self.segments_ = check_segment_map(X, "segments")
        return self

    def transform(self, X):
        check_is_fitted(self, "segments_")
        return superpixel_smooth(X, self.segments_, self.stat)

    def smooth_prediction(self, pred):
        check_is_fitted(self, "segments_")
        if self.apply_to == "scores_only":
            return check_label_field(pred, "pred").copy()
        return smooth_prediction(pred, self.segments_)


class UnknownThresholder(BaseEstimator):
    """Learn a score cut-off as a quantile of the fitted scores.

    ``predict(scores, closed_pred)`` marks pixels below ``threshold_`` as
    UNKNOWN.
    """

    def __init__(self, quantile=0.5):
        self.quantile = quantile

    def fit(self, X, y=None):
        self.threshold_ = score_threshold(X, self.quantile)
        return self

    def predict(self, X, closed_pred):
        check_is_fitted(self, "threshold_")
        scores = check_score_map(X)
        pred = check_label_field(closed_pred, "closed_pred")
        check_same_shape(scores, pred, names=("scores", "closed_pred"))
        finite = np.isfinite(scores)
        unknown = finite if self.quantile >= 1.0 else finite & (scores < self.threshold_)
        out = pred.copy()
        out[unknown] = UNKNOWN
        return out
