"""Raster primitives: smoothing, labeling, per-segment statistics, covariance.

Layout conventions
------------------
Images are ``(H, W, B)`` float64 arrays, band-interleaved (the band axis is
last), pixels in row-major order. Segment and label maps are ``(H, W)``
int64 arrays. Connectivity of segments is always the 4-neighbourhood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from ._validation import (
    ValidationError,
    check_image,
    check_label_field,
    check_real,
    check_same_shape,
    check_segment_map,
)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel truncated at radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(img, sigma: float) -> np.ndarray:
    """Per-band separable Gaussian blur with half-sample symmetric padding.

    ``sigma == 0`` returns an unchanged copy of the input.
    """
    img = check_image(img)
    sigma = check_real(sigma, "sigma", low=0.0)
    if sigma == 0.0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.ascontiguousarray(out)


@njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True)
def _label_4conn(values):
    h, w = values.shape
    n = h * w
    parent = np.arange(n)
    flat = values.ravel()
    for y in range(h):
        for x in range(w):
            p = y * w + x
            if x > 0 and flat[p - 1] == flat[p]:
                a = _find(parent, p - 1)
                b = _find(parent, p)
                if a != b:
                    if a < b:
                        parent[b] = a
                    else:
                        parent[a] = b
            if y > 0 and flat[p - w] == flat[p]:
                a = _find(parent, p - w)
                b = _find(parent, p)
                if a != b:
                    if a < b:
                        parent[b] = a
                    else:
                        parent[a] = b
    out = np.empty(n, dtype=np.int64)
    root_label = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for p in range(n):
        r = _find(parent, p)
        if root_label[r] < 0:
            root_label[r] = nxt
            nxt += 1
        out[p] = root_label[r]
    return out.reshape(h, w)


def connected_components(labels) -> np.ndarray:
    """Split every label of an integer field into its 4-connected pieces.

    Output ids follow first-visit order of a row-major scan, so they are
    compact and deterministic.
    """
    labels = check_label_field(labels)
    return _label_4conn(labels)


def relabel_compact(labels) -> np.ndarray:
    """Map occurring labels onto ``0..K-1`` in row-major first-occurrence order."""
    labels = check_label_field(labels, nonnegative=True)
    uniq, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(uniq.size)
    return rank[inverse].reshape(labels.shape)


def n_segments(seg) -> int:
    return int(np.asarray(seg).max()) + 1


def lower_median_by_label(values: np.ndarray, labels: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Lower median of ``values`` within each label group.

    ``values`` is ``(N,)`` or ``(N, B)``; ``labels`` is ``(N,)`` with ids
    ``0..K-1`` and ``counts`` the group sizes.
    """
    squeeze = values.ndim == 1
    vals = values[:, None] if squeeze else values
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    pick = starts + (counts - 1) // 2
    out = np.empty((counts.size, vals.shape[1]), dtype=np.float64)
    for b in range(vals.shape[1]):
        order = np.lexsort((vals[:, b], labels))
        out[:, b] = vals[order[pick], b]
    return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class SegmentStats:
    """Per-segment pixel counts and per-band sum / mean / lower median."""

    counts: np.ndarray
    sums: np.ndarray
    means: np.ndarray
    medians: np.ndarray

    @property
    def n_segments(self) -> int:
        return int(self.counts.size)

    def representative(self, stat: str) -> np.ndarray:
        return self.means if stat == "mean" else self.medians


def segment_stats(img, seg) -> SegmentStats:
    img = check_image(img)
    seg = check_segment_map(seg)
    check_same_shape(img, seg, names=("img", "seg"))
    k = n_segments(seg)
    flat = seg.ravel()
    vals = img.reshape(-1, img.shape[2])
    counts = np.bincount(flat, minlength=k)
    sums = np.stack([np.bincount(flat, weights=vals[:, b], minlength=k)
                     for b in range(vals.shape[1])], axis=1)
    means = sums / counts[:, None]
    medians = lower_median_by_label(vals, flat, counts)
    return SegmentStats(counts=counts, sums=sums, means=means, medians=medians)


@dataclass(frozen=True)
class CovarianceMatrix:
    """Regularized band covariance together with its lower Cholesky factor."""

    matrix: np.ndarray
    epsilon: float
    cholesky: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    @classmethod
    def from_matrix(cls, matrix, epsilon: float = 0.0) -> "CovarianceMatrix":
        m = np.array(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"covariance must be square, got {m.shape}")
        if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ValidationError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise ValidationError("covariance is not positive definite") from exc
        return cls(matrix=m, epsilon=float(epsilon), cholesky=chol)


def band_covariance(img, epsilon: float | None = None) -> CovarianceMatrix:
    """Sample covariance of the bands over all pixels plus ``epsilon * I``.

    The default ``epsilon`` is ``1e-6 * trace / B``, falling back to ``1e-6``
    when every band is constant.
    """
    img = check_image(img)
    x = img.reshape(-1, img.shape[2])
    n, b = x.shape
    if n < 2:
        raise ValidationError("band_covariance needs at least two pixels")
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / (n - 1)
    cov = 0.5 * (cov + cov.T)
    if epsilon is None:
        tr = float(np.trace(cov))
        epsilon = 1e-6 * tr / b if tr > 0 else 1e-6
    epsilon = check_real(epsilon, "epsilon", low=0.0, low_inclusive=False)
    return CovarianceMatrix.from_matrix(cov + epsilon * np.eye(b), epsilon)


def is_4_connected(seg) -> bool:
    """True when every label of ``seg`` forms a single 4-connected component."""
    seg = check_label_field(seg)
    cc = _label_4conn(seg)
    return int(cc.max()) + 1 == np.unique(seg).size


def boundary_pairs(seg) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks of label changes across horizontal and vertical pixel edges."""
    seg = np.asarray(seg)
    return seg[:, 1:] != seg[:, :-1], seg[1:, :] != seg[:-1, :]
