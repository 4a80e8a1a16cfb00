"""Open-set evaluation: ROC / AUROC, Cohen's kappa, threshold sweeps and
leave-one-class-out scenario construction.

Unknown pixels are the ROC positive class and low scores indicate unknowns,
so the detector statistic is ``-score``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import (
    IGNORE,
    SENTINELS,
    UNKNOWN,
    ValidationError,
    check_label_field,
    check_real,
    check_same_shape,
    check_score_map,
)
from .postprocess import threshold_unknown

COARSE_QUANTILES = tuple(round(0.1 * i, 2) for i in range(11))
FINE_QUANTILES = tuple(round(0.90 + 0.01 * i, 2) for i in range(11))


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auroc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_from_statistic(stat, positive) -> RocCurve:
    """ROC of a detector where larger ``stat`` means more likely positive."""
    stat = np.asarray(stat, dtype=np.float64).ravel()
    positive = np.asarray(positive, dtype=bool).ravel()
    if stat.shape != positive.shape:
        raise ValidationError("statistic and labels differ in length")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-stat, kind="stable")
    s = stat[order]
    p = positive[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    auroc = float(np.trapezoid(tpr, fpr)) if hasattr(np, "trapezoid") else float(np.trapz(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, auroc=auroc)


def roc_auroc(scores, gt_unknown, valid=None) -> RocCurve:
    """ROC for unknown-vs-known discrimination over valid pixels."""
    scores = np.asarray(scores, dtype=np.float64)
    gt_unknown = np.asarray(gt_unknown, dtype=bool)
    if valid is None:
        valid = np.ones(scores.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool) & np.isfinite(scores)
    if scores.shape != gt_unknown.shape or scores.shape != valid.shape:
        raise ValidationError("scores, gt_unknown and valid must share a shape")
    return roc_from_statistic(-scores[valid], gt_unknown[valid])


def cohen_kappa(pred, gt, valid=None) -> float:
    """Cohen's kappa over all labels (classes and UNKNOWN) seen on valid pixels."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValidationError("pred and gt differ in size")
    if valid is not None:
        mask = np.asarray(valid, dtype=bool).ravel()
        pred, gt = pred[mask], gt[mask]
    if pred.size == 0:
        raise ValidationError("cohen_kappa needs at least one valid pixel")
    cats, inv = np.unique(np.concatenate([pred, gt]), return_inverse=True)
    k = cats.size
    a, b = inv[: pred.size], inv[pred.size:]
    cm = np.bincount(a * k + b, minlength=k * k).reshape(k, k)
    return kappa_from_confusion(cm)


def kappa_from_confusion(cm) -> float:
    """Kappa from an integer confusion matrix, evaluated in exact integer arithmetic."""
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    agree = int(np.trace(cm))
    chance = int((cm.sum(axis=1) * cm.sum(axis=0)).sum())
    denom = n * n - chance
    if denom == 0:
        return 1.0 if agree == n else 0.0
    return (n * agree - chance) / denom


@dataclass(frozen=True)
class KappaTable:
    thresholds: tuple[float, ...]
    kappas: tuple[float, ...]

    def as_rows(self) -> list[dict]:
        return [{"quantile": q, "kappa": k} for q, k in zip(self.thresholds, self.kappas)]


def kappa_sweep(scores, closed_pred, gt, thresholds=COARSE_QUANTILES, valid=None) -> KappaTable:
    """Kappa of the thresholded prediction against ``gt`` at each score quantile.

    ``gt`` should already carry UNKNOWN for unseen classes; IGNORE pixels and
    pixels without a finite score are excluded.
    """
    scores = check_score_map(scores)
    pred = check_label_field(closed_pred, "closed_pred")
    gt = check_label_field(gt, "gt")
    check_same_shape(scores, pred, gt, names=("scores", "closed_pred", "gt"))
    qs = [check_real(q, "threshold", low=0.0, high=1.0) for q in thresholds]
    if any(b <= a for a, b in zip(qs, qs[1:])):
        raise ValidationError("thresholds must be strictly increasing")
    mask = (gt != IGNORE) & np.isfinite(scores)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    kappas = tuple(cohen_kappa(threshold_unknown(scores, pred, q), gt, mask) for q in qs)
    return KappaTable(thresholds=tuple(qs), kappas=kappas)


@dataclass(frozen=True)
class LocoScenario:
    uuc: int
    kkcs: tuple[int, ...]
    train_mask: np.ndarray
    eval_gt: np.ndarray

    def train_labels(self, gt) -> np.ndarray:
        """``gt`` restricted to the training pixels (everything else IGNORE)."""
        out = np.asarray(gt, dtype=np.int64).copy()
        out[~self.train_mask] = IGNORE
        return out


def loco_split(gt, uuc: int, kuc_ids=()) -> LocoScenario:
    """Hold out class ``uuc``: it becomes UNKNOWN, known-unknown classes become IGNORE."""
    gt = check_label_field(gt, "gt")
    kuc = {int(c) for c in kuc_ids}
    uuc = int(uuc)
    if uuc in kuc or uuc in SENTINELS:
        raise ValidationError(f"uuc={uuc} must be an ordinary class")
    if not np.any(gt == uuc):
        raise ValidationError(f"uuc={uuc} does not occur in gt")
    present = {int(c) for c in np.unique(gt) if c >= 0}
    kkcs = tuple(sorted(present - kuc - {uuc}))
    train = np.isin(gt, kkcs)
    eval_gt = gt.copy()
    eval_gt[gt == uuc] = UNKNOWN
    if kuc:
        eval_gt[np.isin(gt, list(kuc))] = IGNORE
    return LocoScenario(uuc=uuc, kkcs=kkcs, train_mask=train, eval_gt=eval_gt)
