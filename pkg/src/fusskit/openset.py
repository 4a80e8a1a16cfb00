"""Per-class density models for open-set pixel scoring.

Two scorers are provided, both as scikit-learn density estimators
(``fit`` / ``score_samples`` / ``score``):

* :class:`GaussianMixtureDensity` - full-covariance Gaussian mixture fitted
  by EM (the default open-set scorer, 4 components).
* :class:`PCSDensity` - probabilistic-PCA likelihood (principal component
  scoring baseline, 16 components).

One model is fitted per known class; the pixel score is the log-likelihood
under the model of the class the closed-set network predicted. Higher
scores mean "more in-distribution".
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    SENTINELS,
    ValidationError,
    check_features,
    check_int,
    check_label_field,
    check_real,
    check_same_shape,
)

LOG_2PI = math.log(2.0 * math.pi)
FORMAT_NAME = "fusskit.class-models"
FORMAT_VERSION = 1
_KMEANS_ITERS = 10


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[i] = X[idx]
        d2 = np.minimum(d2, ((X - centers[i]) ** 2).sum(axis=1))
    return centers


def _nearest(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (X * X).sum(1)[:, None] - 2.0 * X @ centers.T + (centers * centers).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def kmeans_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding refined by a few Lloyd steps; returns hard assignments."""
    centers = _kmeans_pp(X, k, rng)
    assign = _nearest(X, centers)
    for _ in range(_KMEANS_ITERS):
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = X[members].mean(axis=0)
        new = _nearest(X, centers)
        if np.array_equal(new, assign):
            break
        assign = new
    return assign


def gaussian_log_density(X: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Row-wise log N(x | mean, L L^T) given the lower Cholesky factor ``L``."""
    z = solve_triangular(chol, (X - mean).T, lower=True)
    maha = np.einsum("ij,ij->j", z, z)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (X.shape[1] * LOG_2PI + log_det + maha)


class GaussianMixtureDensity(DensityMixin, BaseEstimator):
    """Full-covariance Gaussian mixture fitted by expectation maximization.

    Initialization is seeded k-means++ followed by a few Lloyd steps; EM
    stops when the mean per-sample log-likelihood improves by less than
    ``tol`` or after ``max_iter`` iterations. ``reg_covar * I`` is added to
    every covariance in each M-step.

    Attributes
    ----------
    weights_, means_, covariances_ : arrays
        Mixture parameters, shapes (M,), (M, D), (M, D, D).
    log_likelihood_history_ : list of float
        Mean log-likelihood of the training data after initialization and
        after every EM iteration.
    """

    def __init__(self, n_components=4, reg_covar=1e-6, max_iter=100, tol=1e-3,
                 random_state=0):
        self.n_components = n_components
        self.reg_covar = reg_covar
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _m_step(self, X, resp):
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 10 * np.finfo(float).eps)
        means = (resp.T @ X) / nk[:, None]
        d = X.shape[1]
        covs = np.empty((resp.shape[1], d, d))
        for j in range(resp.shape[1]):
            diff = X - means[j]
            c = (resp[:, j, None] * diff).T @ diff / nk[j]
            c = 0.5 * (c + c.T)
            c.flat[:: d + 1] += self.reg_covar
            covs[j] = c
        self.weights_ = nk / nk.sum()
        self.means_ = means
        self.covariances_ = covs
        self._chol = np.linalg.cholesky(covs)

    def _weighted_log_prob(self, X):
        return np.stack([gaussian_log_density(X, self.means_[j], self._chol[j])
                         for j in range(self.weights_.size)], axis=1) + np.log(self.weights_)

    def _e_step(self, X):
        wlp = self._weighted_log_prob(X)
        norm = logsumexp(wlp, axis=1)
        return norm.mean(), np.exp(wlp - norm[:, None])

    def fit(self, X, y=None):
        X = check_features(X, "X")
        m = check_int(self.n_components, "n_components", low=1)
        check_real(self.reg_covar, "reg_covar", low=0.0)
        check_int(self.max_iter, "max_iter", low=1)
        if X.shape[0] < m:
            raise ValidationError(f"need at least n_components={m} samples, got {X.shape[0]}")
        rng = np.random.default_rng(self.random_state)
        assign = kmeans_init(X, m, rng) if m > 1 else np.zeros(X.shape[0], dtype=np.int64)
        resp = np.zeros((X.shape[0], m))
        resp[np.arange(X.shape[0]), assign] = 1.0

        self._m_step(X, resp)
        ll, resp = self._e_step(X)
        history = [float(ll)]
        self.converged_ = False
        self.n_iter_ = 0
        for it in range(1, self.max_iter + 1):
            self._m_step(X, resp)
            ll, resp = self._e_step(X)
            history.append(float(ll))
            self.n_iter_ = it
            if history[-1] - history[-2] < self.tol:
                self.converged_ = True
                break
        self.log_likelihood_history_ = history
        self.n_features_in_ = X.shape[1]
        return self

    def score_samples(self, X):
        """Per-sample log-likelihood ``log sum_m w_m N(x | mu_m, Sigma_m)``."""
        check_is_fitted(self, "means_")
        X = check_features(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return logsumexp(self._weighted_log_prob(X), axis=1)

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def get_state(self) -> dict:
        return {"weights": self.weights_.tolist(), "means": self.means_.tolist(),
                "covariances": self.covariances_.tolist(), "n_iter": self.n_iter_,
                "converged": self.converged_,
                "log_likelihood_history": list(self.log_likelihood_history_)}

    def set_state(self, state: dict) -> "GaussianMixtureDensity":
        self.weights_ = np.asarray(state["weights"], dtype=np.float64)
        self.means_ = np.asarray(state["means"], dtype=np.float64)
        self.covariances_ = np.asarray(state["covariances"], dtype=np.float64)
        self._chol = np.linalg.cholesky(self.covariances_)
        self.n_iter_ = state.get("n_iter", 0)
        self.converged_ = state.get("converged", True)
        self.log_likelihood_history_ = state.get("log_likelihood_history", [])
        self.n_features_in_ = self.means_.shape[1]
        return self


class PCSDensity(DensityMixin, BaseEstimator):
    """Probabilistic-PCA log-likelihood scorer.

    Keeps the top ``n_components`` axes of the sample covariance; the
    discarded directions share the isotropic noise variance (mean of the
    discarded eigenvalues). Scores are log-densities of
    ``N(mean, W W^T + sigma^2 I)``.

    When the noise variance is exactly zero the model is degenerate: points
    off the principal subspace score ``-inf`` and points on it get the
    log-density of the subspace Gaussian.
    """

    def __init__(self, n_components=16):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_features(X, "X")
        n, d = X.shape
        q = check_int(self.n_components, "n_components", low=1)
        if q >= d:
            raise ValidationError(f"n_components={q} must be < feature dimension {d}")
        if n <= q:
            raise ValidationError(f"need more than n_components={q} samples, got {n}")
        self.mean_ = X.mean(axis=0)
        xc = X - self.mean_
        cov = (xc.T @ xc) / max(n - 1, 1)
        evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
        order = np.argsort(evals, kind="stable")[::-1]
        evals = evals[order]
        evecs = evecs[:, order]
        # numerically-zero eigenvalues are snapped so rank-deficient data is exact
        evals[evals < d * np.finfo(float).eps * max(evals[0], 0.0)] = 0.0
        self.components_ = np.ascontiguousarray(evecs[:, :q].T)
        self.explained_variance_ = evals[:q].copy()
        self.noise_variance_ = float(evals[q:].mean())
        self.eigenvalues_ = evals
        self.n_features_in_ = d
        return self

    def score_samples(self, X):
        check_is_fitted(self, "components_")
        X = check_features(X, "X")
        d = self.n_features_in_
        if X.shape[1] != d:
            raise ValidationError(f"expected {d} features, got {X.shape[1]}")
        xc = X - self.mean_
        z = xc @ self.components_.T
        resid = ((xc - z @ self.components_) ** 2).sum(axis=1)
        s2 = self.noise_variance_
        q = self.components_.shape[0]
        if s2 > 0:
            # Woodbury: C = U diag(max(lam - s2, 0)) U^T + s2 I has eigenvalues
            # max(lam, s2) along U and s2 elsewhere.
            v = np.maximum(self.explained_variance_, s2)
            log_det = np.log(v).sum() + (d - q) * math.log(s2)
            maha = (z * z / v).sum(axis=1) + resid / s2
            return -0.5 * (d * LOG_2PI + log_det + maha)
        keep = self.explained_variance_ > 0
        v = self.explained_variance_[keep]
        zk = z[:, keep]
        out = -0.5 * (v.size * LOG_2PI + np.log(v).sum() + (zk * zk / v).sum(axis=1))
        scale = 1.0 + (xc * xc).sum(axis=1)
        out[resid > 1e-9 * scale] = -np.inf
        return out

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def get_state(self) -> dict:
        return {"mean": self.mean_.tolist(), "components": self.components_.tolist(),
                "explained_variance": self.explained_variance_.tolist(),
                "noise_variance": self.noise_variance_,
                "eigenvalues": self.eigenvalues_.tolist()}

    def set_state(self, state: dict) -> "PCSDensity":
        self.mean_ = np.asarray(state["mean"], dtype=np.float64)
        self.components_ = np.asarray(state["components"], dtype=np.float64)
        self.explained_variance_ = np.asarray(state["explained_variance"], dtype=np.float64)
        self.noise_variance_ = float(state["noise_variance"])
        self.eigenvalues_ = np.asarray(state.get("eigenvalues", []), dtype=np.float64)
        self.n_features_in_ = self.mean_.size
        return self


# Functional entry points --------------------------------------------------

def fit_gmm(features, n_components=4, reg_covar=1e-6, seed=0, max_iters=100, tol=1e-3):
    return GaussianMixtureDensity(n_components, reg_covar, max_iters, tol, seed).fit(features)


def gmm_log_likelihood(model: GaussianMixtureDensity, features) -> np.ndarray:
    return model.score_samples(features)


def fit_pcs(features, n_components=16) -> PCSDensity:
    return PCSDensity(n_components).fit(features)


def pcs_log_likelihood(model: PCSDensity, features) -> np.ndarray:
    return model.score_samples(features)


KINDS = {"gmm": GaussianMixtureDensity, "pcs": PCSDensity}
DEFAULT_COMPONENTS = {"gmm": 4, "pcs": 16}


def make_density(kind: str, params: dict | None = None, seed=0):
    if kind not in KINDS:
        raise ValidationError(f"unknown scorer kind {kind!r} (expected gmm or pcs)")
    params = dict(params or {})
    params.setdefault("n_components", DEFAULT_COMPONENTS[kind])
    if kind == "gmm":
        params["random_state"] = seed
    return KINDS[kind](**params)


@dataclass
class ClassModelSet:
    """One fitted density model per known class, sharing feature dimension."""

    kind: str
    models: dict[int, BaseEstimator]
    seed: int = 0
    params: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return next(iter(self.models.values())).n_features_in_

    @property
    def classes(self) -> list[int]:
        return sorted(self.models)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "kind": self.kind,
            "dim": self.dim,
            "seed": self.seed,
            "params": self.params,
            "metadata": self.metadata,
            "classes": {str(c): self.models[c].get_state() for c in self.classes},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassModelSet":
        if doc.get("format") != FORMAT_NAME:
            raise ValidationError("not a class-model document")
        if doc.get("version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported class-model version {doc.get('version')}")
        kind = doc["kind"]
        models = {}
        for key, state in doc["classes"].items():
            est = make_density(kind, doc.get("params"), seed=[doc["seed"], int(key)])
            models[int(key)] = est.set_state(state)
        out = cls(kind=kind, models=models, seed=doc["seed"], params=doc.get("params", {}),
                  metadata=doc.get("metadata", {}))
        if out.dim != doc["dim"]:
            raise ValidationError("stored dimension does not match the models")
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "ClassModelSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_class_models(features, train_labels, kind: str = "gmm", params: dict | None = None,
                     seed: int = 0, max_samples_per_class: int = 100_000) -> ClassModelSet:
    """Fit one model per class found in ``train_labels`` (sentinels skipped).

    Classes with more than ``max_samples_per_class`` pixels are subsampled
    uniformly without replacement, seeded per class.
    """
    feats = np.asarray(features, dtype=np.float64)
    labels = check_label_field(train_labels, "train_labels")
    if feats.ndim != 3:
        raise ValidationError(f"features must be (H, W, D), got {feats.shape}")
    check_same_shape(feats, labels, names=("features", "train_labels"))
    X = check_features(feats)
    flat = labels.ravel()
    classes = sorted(int(c) for c in np.unique(flat) if c not in SENTINELS and c >= 0)
    if not classes:
        raise ValidationError("train_labels contain no known-class pixels")
    check_int(max_samples_per_class, "max_samples_per_class", low=1)
    models, counts = {}, {}
    for c in classes:
        idx = np.flatnonzero(flat == c)
        if idx.size > max_samples_per_class:
            rng = np.random.default_rng([seed, c])
            idx = np.sort(rng.choice(idx, size=max_samples_per_class, replace=False))
        est = make_density(kind, params, seed=[seed, c])
        need = est.n_components if kind == "gmm" else est.n_components + 1
        if idx.size < need:
            raise ValidationError(f"class {c} has {idx.size} samples, needs at least {need}")
        models[c] = est.fit(X[idx])
        counts[str(c)] = int(idx.size)
    return ClassModelSet(kind=kind, models=models, seed=seed, params=dict(params or {}),
                         metadata={"n_samples": counts,
                                   "max_samples_per_class": max_samples_per_class})


def open_set_score_map(models: ClassModelSet, features, closed_pred,
                       combine: str = "predicted") -> np.ndarray:
    """Per-pixel log-likelihood under the predicted class's model.

    ``combine="max"`` takes the best score over all class models instead.
    Pixels whose prediction is a sentinel get ``-inf``.
    """
    feats = np.asarray(features, dtype=np.float64)
    pred = check_label_field(closed_pred, "closed_pred")
    if feats.ndim != 3:
        raise ValidationError(f"features must be (H, W, D), got {feats.shape}")
    check_same_shape(feats, pred, names=("features", "closed_pred"))
    if feats.shape[2] != models.dim:
        raise ValidationError(f"features have D={feats.shape[2]}, models expect {models.dim}")
    X = check_features(feats)
    flat = pred.ravel()
    out = np.full(flat.size, -np.inf)
    valid = flat >= 0
    if combine == "predicted":
        missing = sorted(set(np.unique(flat[valid]).tolist()) - set(models.classes))
        if missing:
            raise ValidationError(f"no model for predicted classes {missing}")
        for c in models.classes:
            idx = np.flatnonzero(flat == c)
            if idx.size:
                out[idx] = models.models[c].score_samples(X[idx])
    elif combine == "max":
        idx = np.flatnonzero(valid)
        if idx.size:
            out[idx] = np.max(np.stack([models.models[c].score_samples(X[idx])
                                        for c in models.classes]), axis=0)
    else:
        raise ValidationError(f"combine must be 'predicted' or 'max', got {combine!r}")
    return out.reshape(pred.shape)


class OpenSetScorer(BaseEstimator):
    """Fit per-class density models and turn feature maps into score maps.

    ``fit(features, train_labels)`` then ``score_map(features, closed_pred)``.
    """

    def __init__(self, kind="gmm", n_components=None, reg_covar=1e-6, max_iter=100,
                 tol=1e-3, max_samples_per_class=100_000, combine="predicted",
                 random_state=0):
        self.kind = kind
        self.n_components = n_components
        self.reg_covar = reg_covar
        self.max_iter = max_iter
        self.tol = tol
        self.max_samples_per_class = max_samples_per_class
        self.combine = combine
        self.random_state = random_state

    def _density_params(self) -> dict:
        params = {}
        if self.n_components is not None:
            params["n_components"] = self.n_components
        if self.kind == "gmm":
            params.update(reg_covar=self.reg_covar, max_iter=self.max_iter, tol=self.tol)
        return params

    def fit(self, X, y):
        self.model_set_ = fit_class_models(X, y, self.kind, self._density_params(),
                                           self.random_state, self.max_samples_per_class)
        return self

    def score_map(self, X, closed_pred):
        check_is_fitted(self, "model_set_")
        return open_set_score_map(self.model_set_, X, closed_pred, self.combine)
