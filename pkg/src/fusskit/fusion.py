"""Segmentation fusion: common refinement of two segmentations followed by
Mahalanobis-guided absorption of undersized segments.
"""
from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator, ClusterMixin, clone

from ._validation import (
    ValidationError,
    check_image,
    check_int,
    check_same_shape,
    check_segment_map,
    check_stat,
)
from .raster import (
    CovarianceMatrix,
    SegmentStats,
    band_covariance,
    connected_components,
    n_segments,
    relabel_compact,
)


class AdjacencyGraph:
    """Symmetric 4-adjacency between segments with shared-border lengths.

    ``neighbors[a][b]`` is the number of pixel edges separating segment ``a``
    from segment ``b``.
    """

    def __init__(self, neighbors: dict[int, dict[int, int]]):
        self.neighbors = neighbors

    @classmethod
    def from_segments(cls, seg) -> "AdjacencyGraph":
        seg = np.asarray(seg, dtype=np.int64)
        k = n_segments(seg)
        a = np.concatenate([seg[:, :-1].ravel(), seg[:-1, :].ravel()])
        b = np.concatenate([seg[:, 1:].ravel(), seg[1:, :].ravel()])
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        keys, counts = np.unique(lo * k + hi, return_counts=True)
        neighbors: dict[int, dict[int, int]] = {i: {} for i in range(k)}
        for key, c in zip(keys.tolist(), counts.tolist()):
            i, j = divmod(key, k)
            neighbors[i][j] = c
            neighbors[j][i] = c
        return cls(neighbors)

    def border(self, a: int, b: int) -> int:
        return self.neighbors[a].get(b, 0)

    def merge(self, src: int, dst: int) -> None:
        """Fold ``src`` into ``dst``, summing shared borders."""
        nb_src = self.neighbors.pop(src)
        nb_dst = self.neighbors[dst]
        nb_dst.pop(src, None)
        for n, length in nb_src.items():
            if n == dst:
                continue
            nb_n = self.neighbors[n]
            del nb_n[src]
            nb_n[dst] = nb_n.get(dst, 0) + length
            nb_dst[n] = nb_dst.get(n, 0) + length


@dataclass(frozen=True)
class FussParams:
    min_size: int = 50
    stat: str = "mean"
    covariance: CovarianceMatrix | None = None

    def __post_init__(self):
        check_int(self.min_size, "min_size", low=1)
        check_stat(self.stat)


def join_segmentations(s1, s2) -> np.ndarray:
    """Coarsest 4-connected common refinement of two segmentations."""
    s1 = check_segment_map(s1, "s1")
    s2 = check_segment_map(s2, "s2")
    check_same_shape(s1, s2, names=("s1", "s2"))
    key = s1 * (int(s2.max()) + 1) + s2
    return connected_components(key)


def mahalanobis_distance(a, b, cov: CovarianceMatrix) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size != cov.dim:
        raise ValidationError(
            f"dimension mismatch: a{a.shape}, b{b.shape}, covariance {cov.dim}x{cov.dim}")
    z = solve_triangular(cov.cholesky, a - b, lower=True)
    return float(np.sqrt(z @ z))


def _mahalanobis_rows(origin: np.ndarray, others: np.ndarray, chol: np.ndarray) -> np.ndarray:
    z = solve_triangular(chol, (others - origin).T, lower=True)
    return np.sqrt(np.einsum("ij,ij->j", z, z))


def _pick(candidates: list[int], dist: np.ndarray | None, borders: list[int]) -> int:
    # Order: smallest distance, then longest shared border, then smallest id.
    if dist is None:
        keys = [(-borders[i], c) for i, c in enumerate(candidates)]
    else:
        keys = [(dist[i], -borders[i], c) for i, c in enumerate(candidates)]
    return candidates[min(range(len(candidates)), key=keys.__getitem__)]


def closest_neighbor(seg_id: int, seg, stats: SegmentStats, adj: AdjacencyGraph,
                     params: FussParams) -> int:
    """Spatial neighbour of ``seg_id`` with the smallest Mahalanobis distance."""
    candidates = sorted(adj.neighbors.get(seg_id, {}))
    if not candidates:
        raise ValidationError(f"segment {seg_id} has no spatial neighbour")
    if params.covariance is None:
        raise ValidationError("FussParams.covariance is required")
    rep = stats.representative(params.stat)
    dist = _mahalanobis_rows(rep[seg_id], rep[candidates], params.covariance.cholesky)
    return _pick(candidates, dist, [adj.border(seg_id, c) for c in candidates])


class _RegionMerger:
    """Smallest-first absorption of undersized segments into a neighbour.

    With ``img``/``cov`` given, the target is the Mahalanobis-closest
    neighbour; otherwise the neighbour sharing the longest border.
    """

    def __init__(self, seg: np.ndarray, img: np.ndarray | None = None,
                 cov: CovarianceMatrix | None = None, stat: str = "mean"):
        self.seg = seg
        self.k = n_segments(seg)
        self.adj = AdjacencyGraph.from_segments(seg)
        flat = seg.ravel()
        self.counts = np.bincount(flat, minlength=self.k).astype(np.int64)
        self.owner = np.arange(self.k)
        self.alive = self.k
        self.use_distance = img is not None
        if self.use_distance:
            self.stat = stat
            self.chol = cov.cholesky
            vals = img.reshape(-1, img.shape[2])
            self.sums = np.stack([np.bincount(flat, weights=vals[:, b], minlength=self.k)
                                  for b in range(vals.shape[1])], axis=1)
            if stat == "median":
                self.vals = vals
                order = np.argsort(flat, kind="stable")
                bounds = np.cumsum(self.counts)[:-1]
                self.pixels = dict(enumerate(np.split(order, bounds)))
                self.reps = np.empty_like(self.sums)
                for i in range(self.k):
                    self.reps[i] = self._median(self.pixels[i])
            else:
                self.reps = self.sums / self.counts[:, None]

    def _median(self, idx: np.ndarray) -> np.ndarray:
        v = self.vals[idx]
        m = (idx.size - 1) // 2
        return np.partition(v, m, axis=0)[m]

    def _target(self, s: int) -> int:
        nb = self.adj.neighbors[s]
        candidates = sorted(nb)
        borders = [nb[c] for c in candidates]
        dist = None
        if self.use_distance:
            dist = _mahalanobis_rows(self.reps[s], self.reps[candidates], self.chol)
        return _pick(candidates, dist, borders)

    def _absorb(self, s: int, t: int) -> None:
        self.adj.merge(s, t)
        self.counts[t] += self.counts[s]
        self.counts[s] = 0
        self.owner[s] = t
        self.alive -= 1
        if self.use_distance:
            self.sums[t] += self.sums[s]
            if self.stat == "median":
                self.pixels[t] = np.concatenate((self.pixels[t], self.pixels.pop(s)))
                self.reps[t] = self._median(self.pixels[t])
            else:
                self.reps[t] = self.sums[t] / self.counts[t]

    def run(self, min_size: int) -> np.ndarray:
        heap = [(int(c), i) for i, c in enumerate(self.counts) if c < min_size]
        heapq.heapify(heap)
        while heap and self.alive > 1:
            c, s = heapq.heappop(heap)
            if self.counts[s] != c:
                continue
            if not self.adj.neighbors[s]:
                continue
            t = self._target(s)
            self._absorb(s, t)
            if self.counts[t] < min_size:
                heapq.heappush(heap, (int(self.counts[t]), t))
        return self.labels()

    def labels(self) -> np.ndarray:
        root = self.owner.copy()
        # owners only point at segments absorbed later, so chains are finite
        while True:
            nxt = root[root]
            if np.array_equal(nxt, root):
                break
            root = nxt
        return relabel_compact(root[self.seg])


def merge_small_segments(seg, min_size: int) -> np.ndarray:
    """Absorb segments below ``min_size`` into their most-adjacent neighbour."""
    seg = check_segment_map(seg)
    if min_size <= 1 or n_segments(seg) == 1:
        return seg
    return _RegionMerger(seg).run(min_size)


def fuss(s1, s2, img, params: FussParams | None = None) -> np.ndarray:
    """Fuse two segmentations of ``img``.

    The common refinement is computed first; then, smallest segment first
    (ties by label), every segment below ``params.min_size`` pixels is merged
    into the neighbour whose mean/median band vector is closest in
    Mahalanobis distance. Merges only join adjacent segments, so boundaries
    can disappear but never appear.
    """
    params = params or FussParams()
    img = check_image(img)
    joint = join_segmentations(s1, s2)
    check_same_shape(img, joint, names=("img", "segmentations"))
    cov = params.covariance if params.covariance is not None else band_covariance(img)
    if cov.dim != img.shape[2]:
        raise ValidationError(f"covariance dimension {cov.dim} != band count {img.shape[2]}")
    n_pix = joint.size
    min_size = params.min_size
    if min_size > n_pix:
        warnings.warn(f"min_size={min_size} exceeds the pixel count; clamped to {n_pix}",
                      stacklevel=2)
        min_size = n_pix
    if min_size <= 1:
        return joint
    return _RegionMerger(joint, img, cov, params.stat).run(min_size)


class FussSegmenter(ClusterMixin, BaseEstimator):
    """Fuse the outputs of two segmenters into one segmentation.

    Parameters
    ----------
    first, second : segmenter estimators
        Anything with ``fit_predict(img)`` returning a segment map.
    min_size : int
        Pixel floor for output segments.
    stat : {"mean", "median"}
        Segment representative used in the merge distance.
    epsilon : float or None
        Covariance regularization; ``None`` uses the scale-aware default.
    """

    def __init__(self, first=None, second=None, min_size=50, stat="mean", epsilon=None):
        self.first = first
        self.second = second
        self.min_size = min_size
        self.stat = stat
        self.epsilon = epsilon

    def fit(self, X, y=None):
        img = check_image(X)
        if self.first is None or self.second is None:
            raise ValidationError("FussSegmenter needs two segmenters")
        self.first_ = clone(self.first)
        self.second_ = clone(self.second)
        s1 = self.first_.fit_predict(img)
        s2 = self.second_.fit_predict(img)
        params = FussParams(min_size=self.min_size, stat=self.stat,
                            covariance=band_covariance(img, self.epsilon))
        self.labels_ = fuss(s1, s2, img, params)
        return self
