"""SLIC, Quickshift and Felzenszwalb oversegmentation of multi-band rasters.

Each algorithm is available as a plain function taking a parameter record
and as a scikit-learn style clusterer (``fit`` sets ``labels_``;
``fit_predict`` returns them). Outputs are compact, 4-connected segment maps.
Band values are used raw unless ``standardize=True``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import ValidationError, check_image, check_int, check_real
from .fusion import merge_small_segments
from .raster import _find, connected_components, gaussian_smooth, relabel_compact


def standardize_bands(img: np.ndarray) -> np.ndarray:
    """Z-score every band; constant bands are only centred."""
    mu = img.mean(axis=(0, 1))
    sd = img.std(axis=(0, 1))
    sd[sd == 0] = 1.0
    return (img - mu) / sd


# --------------------------------------------------------------------- SLIC

@dataclass(frozen=True)
class SlicParams:
    n_segments: int = 100
    compactness: float = 5.0
    sigma: float = 1.0

    def __post_init__(self):
        check_int(self.n_segments, "n_segments", low=1)
        check_real(self.compactness, "compactness", low=0.0, low_inclusive=False)
        check_real(self.sigma, "sigma", low=0.0)


def _slic_grid(h: int, w: int, k: int) -> tuple[np.ndarray, float, float, float]:
    step = math.sqrt(h * w / k)
    ny = min(h, max(1, int(round(h / step))))
    nx = min(w, max(1, int(round(k / ny))))
    sy, sx = h / ny, w / nx
    ys = (np.arange(ny) + 0.5) * sy - 0.5
    xs = (np.arange(nx) + 0.5) * sx - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1), step, sy, sx


def slic_gradient(img: np.ndarray) -> np.ndarray:
    """Sum over bands of squared forward differences (zero past the last row/column)."""
    g = np.zeros(img.shape[:2])
    g[:, :-1] += ((img[:, 1:] - img[:, :-1]) ** 2).sum(axis=2)
    g[:-1, :] += ((img[1:, :] - img[:-1, :]) ** 2).sum(axis=2)
    return g


def _perturb_seeds(pos: np.ndarray, grad: np.ndarray) -> np.ndarray:
    h, w = grad.shape
    out = pos.copy()
    for i, (cy, cx) in enumerate(pos):
        ry = min(h - 1, max(0, int(round(cy))))
        rx = min(w - 1, max(0, int(round(cx))))
        best, by, bx = grad[ry, rx], ry, rx
        for yy in range(max(0, ry - 1), min(h, ry + 2)):
            for xx in range(max(0, rx - 1), min(w, rx + 2)):
                if grad[yy, xx] < best:
                    best, by, bx = grad[yy, xx], yy, xx
        if (by, bx) != (ry, rx):
            out[i] = (by, bx)
    return out


@njit(cache=True)
def _slic_iterate(img, centers, labels, step, hy, hx, m, max_iters):
    h, w, nb = img.shape
    k = centers.shape[0]
    spatial = (m / step) ** 2
    dist = np.empty((h, w))
    for _ in range(max_iters):
        dist[:] = np.inf
        for c in range(k):
            cy = centers[c, 0]
            cx = centers[c, 1]
            y0 = max(0, int(math.floor(cy - hy)))
            y1 = min(h - 1, int(math.ceil(cy + hy)))
            x0 = max(0, int(math.floor(cx - hx)))
            x1 = min(w - 1, int(math.ceil(cx + hx)))
            for y in range(y0, y1 + 1):
                dy = y - cy
                if abs(dy) > hy:
                    continue
                for x in range(x0, x1 + 1):
                    dx = x - cx
                    if abs(dx) > hx:
                        continue
                    d = 0.0
                    for b in range(nb):
                        t = img[y, x, b] - centers[c, 2 + b]
                        d += t * t
                    d += (dy * dy + dx * dx) * spatial
                    if d < dist[y, x]:
                        dist[y, x] = d
                        labels[y, x] = c
        acc = np.zeros((k, 2 + nb))
        cnt = np.zeros(k)
        for y in range(h):
            for x in range(w):
                c = labels[y, x]
                cnt[c] += 1.0
                acc[c, 0] += y
                acc[c, 1] += x
                for b in range(nb):
                    acc[c, 2 + b] += img[y, x, b]
        for c in range(k):
            if cnt[c] > 0:
                for j in range(2 + nb):
                    centers[c, j] = acc[c, j] / cnt[c]
    return labels


def slic(img, params: SlicParams | None = None, max_iters: int = 10,
         standardize: bool = False) -> np.ndarray:
    """k-means superpixels in the joint band/position space.

    Seeds sit on a regular grid of spacing ``S = sqrt(H*W/K)`` and are nudged
    to the lowest-gradient pixel of their 3x3 neighbourhood (skipped when
    ``S < 3``, where neighbourhoods of adjacent seeds overlap). Each iteration
    lets every centre claim pixels within ``S`` of it along each axis under
    ``d = sqrt(d_band^2 + (d_xy / S)^2 * m^2)``. Disconnected pieces and
    fragments smaller than ``S^2 / 4`` are absorbed afterwards.
    """
    params = params or SlicParams()
    img = check_image(img)
    max_iters = check_int(max_iters, "max_iters", low=1)
    h, w = img.shape[:2]
    if params.n_segments > h * w:
        raise ValidationError(f"n_segments={params.n_segments} exceeds pixel count {h * w}")
    if standardize:
        img = standardize_bands(img)
    img = gaussian_smooth(img, params.sigma)

    pos, step, sy, sx = _slic_grid(h, w, params.n_segments)
    if step >= 3.0:
        pos = _perturb_seeds(pos, slic_gradient(img))
    ry = np.clip(np.round(pos[:, 0]).astype(np.int64), 0, h - 1)
    rx = np.clip(np.round(pos[:, 1]).astype(np.int64), 0, w - 1)
    centers = np.concatenate([pos, img[ry, rx]], axis=1)

    # Initial ownership by grid cell, so pixels no centre reaches stay covered.
    ny = int(round(h / sy))
    nx = int(round(w / sx))
    cell_y = np.minimum((np.arange(h) / sy).astype(np.int64), ny - 1)
    cell_x = np.minimum((np.arange(w) / sx).astype(np.int64), nx - 1)
    labels = cell_y[:, None] * nx + cell_x[None, :]

    hy, hx = max(step, sy), max(step, sx)
    labels = _slic_iterate(img, centers, labels.astype(np.int64), step, hy, hx,
                           float(params.compactness), max_iters)
    seg = connected_components(labels)
    return merge_small_segments(seg, int(math.ceil(step * step / 4.0)))


# --------------------------------------------------------------- Quickshift

@dataclass(frozen=True)
class QuickshiftParams:
    kernel_size: float = 5.0
    max_dist: float = 50.0
    ratio: float = 0.5

    def __post_init__(self):
        check_real(self.kernel_size, "kernel_size", low=0.0, low_inclusive=False)
        check_real(self.max_dist, "max_dist", low=0.0, low_inclusive=False)
        check_real(self.ratio, "ratio", low=0.0, high=1.0, low_inclusive=False)


@njit(cache=True)
def _mirror(i, n):
    # half-sample symmetric reflection: ... b a | a b c | c b ...
    period = 2 * n
    i = i % period
    if i < 0:
        i += period
    if i >= n:
        i = period - 1 - i
    return i


@njit(cache=True)
def _qs_density(feat, kernel_size):
    h, w, nb = feat.shape
    r = int(math.ceil(3.0 * kernel_size))
    inv = 1.0 / (2.0 * kernel_size * kernel_size)
    dens = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(-r, r + 1):
                yy = _mirror(y + dy, h)
                for dx in range(-r, r + 1):
                    xx = _mirror(x + dx, w)
                    d = float(dy * dy + dx * dx)
                    for b in range(nb):
                        t = feat[y, x, b] - feat[yy, xx, b]
                        d += t * t
                    s += math.exp(-d * inv)
            dens[y, x] = s
    return dens


@njit(cache=True)
def _qs_parents(feat, dens, max_dist):
    h, w, nb = feat.shape
    r = int(math.floor(max_dist))
    lim = max_dist * max_dist
    parent = np.arange(h * w)
    pdist = np.zeros(h * w)
    for y in range(h):
        for x in range(w):
            p = y * w + x
            best = np.inf
            bq = p
            for yy in range(max(0, y - r), min(h, y + r + 1)):
                dy = yy - y
                for xx in range(max(0, x - r), min(w, x + r + 1)):
                    if dens[yy, xx] <= dens[y, x]:
                        continue
                    dx = xx - x
                    d = float(dy * dy + dx * dx)
                    if d > lim:
                        continue
                    for b in range(nb):
                        t = feat[y, x, b] - feat[yy, xx, b]
                        d += t * t
                    if d <= lim and d < best:
                        best = d
                        bq = yy * w + xx
            parent[p] = bq
            if bq != p:
                pdist[p] = math.sqrt(best)
    return parent, pdist


@njit(cache=True)
def _forest_roots(parent):
    n = parent.size
    root = np.empty(n, dtype=np.int64)
    for p in range(n):
        q = p
        while parent[q] != q:
            q = parent[q]
        root[p] = q
    return root


def quickshift_tree(img, params: QuickshiftParams | None = None,
                    standardize: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Density, parent index and parent distance for every pixel.

    Returns ``(density (H, W), parent (H*W,), parent_dist (H*W,))``; roots are
    their own parent with distance 0.
    """
    params = params or QuickshiftParams()
    img = check_image(img)
    if standardize:
        img = standardize_bands(img)
    feat = np.ascontiguousarray(img * params.ratio)
    dens = _qs_density(feat, float(params.kernel_size))
    parent, pdist = _qs_parents(feat, dens, float(params.max_dist))
    return dens, parent, pdist


def quickshift(img, params: QuickshiftParams | None = None,
               standardize: bool = False) -> np.ndarray:
    """Mode-seeking segmentation over features ``(ratio * bands, y, x)``.

    Every pixel links to the nearest strictly denser pixel within
    ``max_dist`` in the joint feature space (ties to the first in row-major
    order); the resulting trees, split into 4-connected pieces, are the
    segments. Densities use a Gaussian of width ``kernel_size`` over a mirrored
    window of radius ``ceil(3 * kernel_size)``.
    """
    img = check_image(img)
    _, parent, _ = quickshift_tree(img, params, standardize)
    roots = _forest_roots(parent).reshape(img.shape[:2])
    return connected_components(relabel_compact(roots))


# ------------------------------------------------------------- Felzenszwalb

@dataclass(frozen=True)
class FelzenszwalbParams:
    scale: float = 100.0
    sigma: float = 0.5
    min_size: int = 50

    def __post_init__(self):
        check_real(self.scale, "scale", low=0.0, low_inclusive=False)
        check_real(self.sigma, "sigma", low=0.0)
        check_int(self.min_size, "min_size", low=1)


@njit(cache=True)
def _grid_edges_8(img):
    h, w, nb = img.shape
    n_max = 4 * h * w
    ea = np.empty(n_max, dtype=np.int64)
    eb = np.empty(n_max, dtype=np.int64)
    ew = np.empty(n_max)
    dys = (0, 1, 1, 1)
    dxs = (1, 0, 1, -1)
    m = 0
    for y in range(h):
        for x in range(w):
            for j in range(4):
                yy = y + dys[j]
                xx = x + dxs[j]
                if yy >= h or xx < 0 or xx >= w:
                    continue
                d = 0.0
                for b in range(nb):
                    t = img[y, x, b] - img[yy, xx, b]
                    d += t * t
                ea[m] = y * w + x
                eb[m] = yy * w + xx
                ew[m] = math.sqrt(d)
                m += 1
    return ea[:m], eb[:m], ew[:m]


@njit(cache=True)
def _fz_merge(n, ea, eb, ew, order, scale, min_size):
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    internal = np.zeros(n)
    for i in order:
        a = _find(parent, ea[i])
        b = _find(parent, eb[i])
        if a == b:
            continue
        wgt = ew[i]
        if wgt <= internal[a] + scale / size[a] and wgt <= internal[b] + scale / size[b]:
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            internal[a] = wgt
    for i in order:
        a = _find(parent, ea[i])
        b = _find(parent, eb[i])
        if a != b and (size[a] < min_size or size[b] < min_size):
            if size[a] < size[b]:
                a, b = b, a
            parent[b] = a
            size[a] += size[b]
            internal[a] = max(internal[a], internal[b], ew[i])
    roots = np.empty(n, dtype=np.int64)
    for p in range(n):
        roots[p] = _find(parent, p)
    return roots


def felzenszwalb(img, params: FelzenszwalbParams | None = None,
                 standardize: bool = False) -> np.ndarray:
    """Graph-based segmentation on the 8-connected pixel grid.

    Edges (weight = Euclidean band distance after smoothing) are processed in
    non-descending, stable order; two components merge when the edge weight
    is no larger than either component's internal difference plus
    ``scale / size``. A second pass joins components below ``min_size``.
    Diagonal-only bridges are then split into 4-connected pieces, and any
    piece that falls under ``min_size`` is absorbed into its most-adjacent
    neighbour.
    """
    params = params or FelzenszwalbParams()
    img = check_image(img)
    if standardize:
        img = standardize_bands(img)
    img = gaussian_smooth(img, params.sigma)
    h, w = img.shape[:2]
    ea, eb, ew = _grid_edges_8(img)
    order = np.argsort(ew, kind="stable")
    roots = _fz_merge(h * w, ea, eb, ew, order, float(params.scale), int(params.min_size))
    seg = connected_components(roots.reshape(h, w))
    return merge_small_segments(seg, min(int(params.min_size), h * w))


# --------------------------------------------------------------- estimators

class _Segmenter(ClusterMixin, BaseEstimator):
    def fit(self, X, y=None):
        self.labels_ = self._segment(check_image(X))
        self.n_segments_ = int(self.labels_.max()) + 1
        return self


class SlicSegmenter(_Segmenter):
    """SLIC superpixels; see :func:`slic`."""

    def __init__(self, n_segments=100, compactness=5.0, sigma=1.0, max_iters=10,
                 standardize=False):
        self.n_segments = n_segments
        self.compactness = compactness
        self.sigma = sigma
        self.max_iters = max_iters
        self.standardize = standardize

    def _segment(self, img):
        params = SlicParams(self.n_segments, self.compactness, self.sigma)
        return slic(img, params, self.max_iters, self.standardize)


class QuickshiftSegmenter(_Segmenter):
    """Quickshift superpixels; see :func:`quickshift`."""

    def __init__(self, kernel_size=5.0, max_dist=50.0, ratio=0.5, standardize=False):
        self.kernel_size = kernel_size
        self.max_dist = max_dist
        self.ratio = ratio
        self.standardize = standardize

    def _segment(self, img):
        params = QuickshiftParams(self.kernel_size, self.max_dist, self.ratio)
        return quickshift(img, params, self.standardize)


class FelzenszwalbSegmenter(_Segmenter):
    """Felzenszwalb graph segmentation; see :func:`felzenszwalb`."""

    def __init__(self, scale=100.0, sigma=0.5, min_size=50, standardize=False):
        self.scale = scale
        self.sigma = sigma
        self.min_size = min_size
        self.standardize = standardize

    def _segment(self, img):
        params = FelzenszwalbParams(self.scale, self.sigma, self.min_size)
        return felzenszwalb(img, params, self.standardize)


ALGORITHMS = {
    "slic": (SlicParams, SlicSegmenter),
    "quickshift": (QuickshiftParams, QuickshiftSegmenter),
    "felzenszwalb": (FelzenszwalbParams, FelzenszwalbSegmenter),
}


def make_segmenter(algorithm: str, params) -> _Segmenter:
    """Build the estimator for ``algorithm`` from a params record or dict."""
    if algorithm not in ALGORITHMS:
        raise ValidationError(f"unknown superpixel algorithm {algorithm!r}")
    params_cls, est_cls = ALGORITHMS[algorithm]
    if not isinstance(params, dict):
        params = asdict(params)
    extra = {k: params[k] for k in ("max_iters", "standardize") if k in params}
    allowed = {f.name for f in fields(params_cls)} | set(extra)
    unknown = sorted(set(params) - allowed)
    if unknown:
        raise ValidationError(f"unknown {algorithm} parameters {unknown}; "
                              f"expected {sorted(allowed | {'max_iters', 'standardize'})}")
    core = params_cls(**{k: v for k, v in params.items() if k not in extra})
    return est_cls(**asdict(core), **extra)
