"""Independent reference implementations used as test oracles.

These are deliberately naive (pure Python loops, BFS, dense linear algebra)
so they share no code paths with the package under test.
"""
from __future__ import annotations

from collections import deque

import numpy as np


def flood_fill(labels) -> np.ndarray:
    """4-connected components numbered in row-major first-visit order (BFS)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    out = -np.ones((h, w), dtype=np.int64)
    nxt = 0
    for y in range(h):
        for x in range(w):
            if out[y, x] >= 0:
                continue
            out[y, x] = nxt
            queue = deque([(y, x)])
            while queue:
                cy, cx = queue.popleft()
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and out[ny, nx] < 0 \
                            and labels[ny, nx] == labels[cy, cx]:
                        out[ny, nx] = nxt
                        queue.append((ny, nx))
            nxt += 1
    return out


def same_partition(a, b) -> bool:
    """True when ``a`` and ``b`` group pixels identically (labels may differ)."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def assert_valid_segment_map(seg, shape=None) -> None:
    seg = np.asarray(seg)
    assert seg.ndim == 2
    if shape is not None:
        assert seg.shape == tuple(shape)
    assert np.issubdtype(seg.dtype, np.integer)
    k = int(seg.max()) + 1
    assert seg.min() == 0
    assert np.all(np.bincount(seg.ravel(), minlength=k) > 0), "labels not compact"
    assert int(flood_fill(seg).max()) + 1 == k, "a segment is not 4-connected"


def boundary_edges(seg) -> set:
    """Set of 4-adjacent pixel pairs ((y, x), (y', x')) whose labels differ."""
    seg = np.asarray(seg)
    h, w = seg.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if x + 1 < w and seg[y, x] != seg[y, x + 1]:
                out.add(((y, x), (y, x + 1)))
            if y + 1 < h and seg[y, x] != seg[y + 1, x]:
                out.add(((y, x), (y + 1, x)))
    return out


def pairwise_auroc(stat, positive) -> float:
    """P(stat_pos > stat_neg) + 0.5 P(tie) by brute force over all pairs."""
    stat = np.asarray(stat, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos = stat[positive]
    neg = stat[~positive]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (pos.size * neg.size))


def dense_gaussian_logpdf(X, mean, cov) -> np.ndarray:
    """Log N(x | mean, cov) through an explicit inverse and determinant."""
    X = np.atleast_2d(X)
    d = X.shape[1]
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    diff = X - mean
    maha = np.einsum("ij,jk,ik->i", diff, inv, diff)
    return -0.5 * (d * np.log(2 * np.pi) + logdet + maha)


def random_blocky_labels(rng, h, w, n_labels, block=2) -> np.ndarray:
    """Random label field made of ``block``-sized tiles (gives larger regions)."""
    small = rng.integers(0, n_labels, size=(-(-h // block), -(-w // block)))
    return np.kron(small, np.ones((block, block), dtype=np.int64))[:h, :w]
