"""Seeded synthetic scenes standing in for a trained segmentation backbone.

A scene is a Voronoi partition of the grid whose cells carry classes. Each
pixel gets band values around its class band mean and a feature vector
drawn from its class feature distribution (optionally a two-mode mixture).
The closed-set prediction equals the ground truth except on held-out
classes, whose pixels are assigned to the nearest known class mean.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ._validation import ValidationError


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    n_classes: int = 5
    uuc: int = 4
    n_sites: int = 40
    n_bands: int = 4
    band_means: tuple | None = None
    band_spread: float = 120.0
    band_noise: float = 8.0
    feature_dim: int = 24
    feature_means: tuple | None = None
    feature_sep: float = 0.5
    feature_scale: float = 1.0
    feature_modes: int = 1
    mode_sep: float = 4.0
    score_noise: float = 2.0  # applied to score maps by the pipeline, see add_score_noise

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError("n_classes must be >= 2")
        if not 0 <= self.uuc < self.n_classes:
            raise ValidationError(f"uuc={self.uuc} is not one of the {self.n_classes} classes")
        if self.height < 1 or self.width < 1 or self.n_bands < 1 or self.feature_dim < 1:
            raise ValidationError("grid size, band count and feature_dim must be positive")
        if self.n_sites < self.n_classes:
            raise ValidationError("n_sites must be >= n_classes so every class appears")
        if self.feature_modes not in (1, 2):
            raise ValidationError("feature_modes must be 1 or 2")
        for name in ("band_noise", "feature_scale", "score_noise", "band_spread",
                     "feature_sep", "mode_sep"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.band_means is not None and np.shape(self.band_means) != (self.n_classes, self.n_bands):
            raise ValidationError("band_means must be (n_classes, n_bands)")
        if self.feature_means is not None and \
                np.shape(self.feature_means) != (self.n_classes, self.feature_dim):
            raise ValidationError("feature_means must be (n_classes, feature_dim)")

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("band_means", "feature_means"):
            if out[key] is not None:
                out[key] = np.asarray(out[key]).tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown SynthSpec fields: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("band_means", "feature_means"):
            if doc.get(key) is not None:
                doc[key] = tuple(map(tuple, doc[key]))
        return cls(**doc)


def voronoi_sites(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-site map ``(H, W)`` and the class of each site."""
    sites = rng.random((spec.n_sites, 2)) * [spec.height, spec.width]
    yy, xx = np.mgrid[: spec.height, : spec.width]
    d2 = (yy[..., None] - sites[:, 0]) ** 2 + (xx[..., None] - sites[:, 1]) ** 2
    site_map = np.argmin(d2, axis=2)
    site_class = np.concatenate([rng.permutation(spec.n_classes),
                                 rng.integers(0, spec.n_classes, spec.n_sites - spec.n_classes)])
    # every class must own pixels; hand empty ones the largest site's class slot
    for c in range(spec.n_classes):
        owned = np.bincount(site_map.ravel(), minlength=spec.n_sites)
        if not np.any(owned[site_class == c] > 0):
            donors = np.flatnonzero((owned > 0) & (np.bincount(site_class[owned > 0],
                                                               minlength=spec.n_classes)
                                                   [site_class] > 1))
            if donors.size == 0:
                raise ValidationError("grid too small to host every class")
            site_class[donors[0]] = c
    return site_map, site_class


def synth_scene(spec: SynthSpec, held_out=None):
    """Generate ``(image, gt, features, closed_pred)`` deterministically from ``spec``.

    ``held_out`` lists the classes the simulated backbone never saw (default:
    just ``spec.uuc``); their pixels are predicted as the nearest other class.
    """
    held = {spec.uuc} if held_out is None else {int(c) for c in held_out}
    if not held <= set(range(spec.n_classes)) or len(held) >= spec.n_classes:
        raise ValidationError(f"held_out {sorted(held)} must leave at least one known class")
    rng = np.random.default_rng(spec.seed)
    site_map, site_class = voronoi_sites(spec, rng)
    gt = site_class[site_map].astype(np.int64)

    if spec.band_means is None:
        band_means = rng.random((spec.n_classes, spec.n_bands)) * spec.band_spread
    else:
        band_means = np.asarray(spec.band_means, dtype=np.float64)
    if spec.feature_means is None:
        feat_means = rng.normal(size=(spec.n_classes, spec.feature_dim)) * spec.feature_sep
    else:
        feat_means = np.asarray(spec.feature_means, dtype=np.float64)
    mode_dirs = rng.normal(size=(spec.n_classes, spec.feature_dim))
    mode_dirs /= np.linalg.norm(mode_dirs, axis=1, keepdims=True)

    h, w = gt.shape
    noise = rng.normal(size=(h, w, spec.n_bands))
    image = band_means[gt] + spec.band_noise * noise

    centers = feat_means[gt]
    if spec.feature_modes == 2:
        sign = rng.integers(0, 2, size=(h, w)) * 2 - 1
        centers = centers + (0.5 * spec.mode_sep * sign)[..., None] * mode_dirs[gt]
    features = centers + spec.feature_scale * rng.normal(size=(h, w, spec.feature_dim))

    kkcs = np.array([c for c in range(spec.n_classes) if c not in held])
    closed_pred = gt.copy()
    unk = np.isin(gt, sorted(held))
    if unk.any():
        f = features[unk]
        d2 = ((f[:, None, :] - feat_means[kkcs][None]) ** 2).sum(axis=2)
        closed_pred[unk] = kkcs[np.argmin(d2, axis=1)]
    return image, gt, features, closed_pred


def add_score_noise(scores, level: float, seed) -> np.ndarray:
    """Add seeded i.i.d. Gaussian noise of std ``level`` to the finite scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if level < 0:
        raise ValidationError("score noise level must be nonnegative")
    out = scores.copy()
    if level == 0:
        return out
    finite = np.isfinite(out)
    noise = np.random.default_rng([int(seed), 0x5C0E]).normal(size=out.shape)
    out[finite] += level * noise[finite]
    return out
