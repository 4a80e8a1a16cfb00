from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.stats import ortho_group

from fusskit import IGNORE, UNKNOWN, ValidationError
from fusskit.openset import (
    ClassModelSet,
    GaussianMixtureDensity,
    OpenSetScorer,
    fit_class_models,
    fit_gmm,
    fit_pcs,
    gmm_log_likelihood,
    open_set_score_map,
    pcs_log_likelihood,
)

from helpers import dense_gaussian_logpdf


def _two_clusters(seed, n=2000, d=8, sep=10.0, return_labels=False):
    rng = np.random.default_rng(seed)
    mu = np.zeros((2, d))
    mu[1, 0] = sep
    lab = rng.integers(0, 2, n)
    X = mu[lab] + rng.normal(size=(n, d))
    return (X, mu, lab) if return_labels else (X, mu)


# ---- GMM

def test_gmm_single_component_closed_form():
    X = np.random.default_rng(0).normal(size=(500, 3)) @ np.array([[2, 0, 0], [1, 1, 0], [0, 0.5, 3]])
    g = fit_gmm(X, n_components=1, reg_covar=1e-6)
    mean = X.mean(axis=0)
    cov = (X - mean).T @ (X - mean) / len(X) + 1e-6 * np.eye(3)
    np.testing.assert_allclose(g.means_[0], mean, rtol=0, atol=1e-10)
    np.testing.assert_allclose(g.covariances_[0], cov, rtol=0, atol=1e-10)
    assert g.weights_.tolist() == [1.0]


@pytest.mark.parametrize("seed", range(3))
def test_gmm_two_cluster_recovery(seed):
    X, mu, lab = _two_clusters(seed, return_labels=True)
    g = fit_gmm(X, n_components=2, seed=seed)
    cost = np.abs(g.means_[:, None] - mu[None]).max(axis=2)
    rows, cols = linear_sum_assignment(cost)
    # every coordinate within 0.1 of the generator mean
    assert cost[rows, cols].max() < 0.1
    # clusters 10 sigma apart: the fit reproduces the per-cluster sample means
    sample = np.stack([X[lab == c].mean(axis=0) for c in range(2)])
    np.testing.assert_allclose(g.means_[rows], sample[cols], rtol=0, atol=1e-6)


def test_gmm_deterministic():
    X, _ = _two_clusters(1, n=500)
    a = fit_gmm(X, n_components=3, seed=7)
    b = fit_gmm(X.copy(), n_components=3, seed=7)
    assert np.array_equal(a.means_, b.means_)
    assert np.array_equal(a.covariances_, b.covariances_)
    assert a.log_likelihood_history_ == b.log_likelihood_history_


@pytest.mark.parametrize("seed", range(20))
def test_gmm_em_monotone(seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, 4)) * 3
    X = centers[rng.integers(0, 3, 400)] + rng.normal(size=(400, 4))
    g = GaussianMixtureDensity(n_components=4, tol=1e-12, max_iter=60, random_state=seed).fit(X)
    h = np.array(g.log_likelihood_history_)
    assert np.all(np.diff(h) >= -1e-9)
    assert abs(g.weights_.sum() - 1) < 1e-9


def test_gmm_standard_normal_at_mode():
    g = GaussianMixtureDensity(n_components=1).set_state(
        {"weights": [1.0], "means": [[0.0]], "covariances": [[[1.0]]]})
    assert gmm_log_likelihood(g, [[0.0]])[0] == pytest.approx(-0.5 * math.log(2 * math.pi),
                                                              abs=1e-15)
    assert gmm_log_likelihood(g, [[0.0]])[0] == pytest.approx(-0.9189, abs=1e-4)


def test_gmm_identical_components_collapse():
    one = GaussianMixtureDensity(1).set_state(
        {"weights": [1.0], "means": [[1.0, -2.0]], "covariances": [[[2.0, 0.3], [0.3, 1.0]]]})
    two = GaussianMixtureDensity(2).set_state(
        {"weights": [0.5, 0.5], "means": [[1.0, -2.0]] * 2,
         "covariances": [[[2.0, 0.3], [0.3, 1.0]]] * 2})
    X = np.random.default_rng(0).normal(size=(50, 2))
    np.testing.assert_allclose(one.score_samples(X), two.score_samples(X), rtol=0, atol=1e-12)


def test_gmm_matches_dense_oracle():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(300, 5)) + rng.integers(0, 3, (300, 1)) * 2
    g = fit_gmm(X, n_components=3, seed=1)
    Y = rng.normal(size=(40, 5)) * 2
    dens = sum(w * np.exp(dense_gaussian_logpdf(Y, m, c))
               for w, m, c in zip(g.weights_, g.means_, g.covariances_))
    np.testing.assert_allclose(g.score_samples(Y), np.log(dens), rtol=0, atol=1e-8)


def test_gmm_errors():
    with pytest.raises(ValidationError):
        fit_gmm(np.zeros((3, 2)), n_components=4)
    bad = np.zeros((10, 2))
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError):
        fit_gmm(bad, n_components=1)
    g = fit_gmm(np.random.default_rng(0).normal(size=(20, 2)), n_components=1)
    with pytest.raises(ValidationError):
        g.score_samples(np.zeros((3, 3)))


# ---- PCS

def test_pcs_rank_one_line():
    t = np.linspace(-3, 3, 50)
    direction = np.array([1.0, 2.0, -2.0]) / 3.0
    X = t[:, None] * direction + [1.0, 0.0, 5.0]
    m = fit_pcs(X, n_components=1)
    assert abs(abs(m.components_[0] @ direction) - 1) < 1e-10
    assert m.noise_variance_ == 0.0
    scores = m.score_samples(np.array([[1.0, 0.0, 5.0], [1.0, 1.0, 5.0]]))
    assert np.isfinite(scores[0]) and scores[1] == -np.inf


def test_pcs_isotropic_eigenvalues():
    X = np.random.default_rng(0).normal(size=(10_000, 6)) * 2.0
    m = fit_pcs(X, n_components=3)
    np.testing.assert_allclose(m.eigenvalues_, 4.0, rtol=0.05)


def test_pcs_spectrum_matches_dense_eigensolver():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(400, 6)) @ rng.normal(size=(6, 6))
    m = fit_pcs(X, n_components=5)
    ref = np.sort(np.linalg.eigvalsh(np.cov(X.T)))[::-1]
    np.testing.assert_allclose(m.eigenvalues_, ref, rtol=0, atol=1e-8)
    np.testing.assert_allclose(m.components_ @ m.components_.T, np.eye(5), atol=1e-8)
    assert np.all(np.diff(m.explained_variance_) <= 0)
    assert m.noise_variance_ == pytest.approx(ref[5], abs=1e-8)


def test_pcs_full_rank_matches_dense_gaussian():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
    m = fit_pcs(X, n_components=4)
    Y = rng.normal(size=(30, 5)) * 3
    ref = dense_gaussian_logpdf(Y, X.mean(axis=0), np.cov(X.T))
    np.testing.assert_allclose(pcs_log_likelihood(m, Y), ref, rtol=0, atol=1e-6)


def test_pcs_low_rank_matches_ppca_covariance():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(500, 7)) @ rng.normal(size=(7, 7))
    q = 3
    m = fit_pcs(X, n_components=q)
    lam = m.explained_variance_
    W = m.components_.T * np.sqrt(np.maximum(lam - m.noise_variance_, 0))
    cov = W @ W.T + m.noise_variance_ * np.eye(7)
    Y = rng.normal(size=(20, 7))
    np.testing.assert_allclose(m.score_samples(Y), dense_gaussian_logpdf(Y, m.mean_, cov),
                               rtol=0, atol=1e-8)


def test_pcs_mode_is_maximum():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 4)) * [3, 2, 1, 0.5]
    m = fit_pcs(X, n_components=2)
    lam = m.explained_variance_
    s2 = m.noise_variance_
    closed = -0.5 * (4 * math.log(2 * math.pi) + np.log(lam).sum() + 2 * math.log(s2))
    at_mean = m.score_samples(m.mean_[None])[0]
    assert at_mean == pytest.approx(closed, abs=1e-10)
    assert np.all(m.score_samples(m.mean_ + rng.normal(size=(50, 4))) < at_mean)


def test_pcs_rotation_invariant():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(300, 5)) * [4, 3, 2, 1, 0.5]
    R = ortho_group.rvs(5, random_state=1)
    Y = rng.normal(size=(25, 5))
    a = fit_pcs(X, 2).score_samples(Y)
    b = fit_pcs(X @ R.T, 2).score_samples(Y @ R.T)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-8)


def test_pcs_errors():
    with pytest.raises(ValidationError):
        fit_pcs(np.zeros((10, 3)), n_components=3)
    with pytest.raises(ValidationError):
        fit_pcs(np.random.default_rng(0).normal(size=(3, 5)), n_components=3)


# ---- score maps and class model sets

def _scene(seed=0, h=12, w=10, d=3, classes=3):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, classes, size=(h, w))
    means = rng.normal(size=(classes, d)) * 4
    feats = means[gt] + rng.normal(size=(h, w, d))
    return feats, gt


def test_score_map_single_class():
    feats, _ = _scene()
    labels = np.zeros(feats.shape[:2], dtype=int)
    models = fit_class_models(feats, labels, "gmm", {"n_components": 2})
    out = open_set_score_map(models, feats, labels)
    np.testing.assert_array_equal(out.ravel(), models.models[0].score_samples(feats.reshape(-1, 3)))
    assert len(models.models) == 1


def test_score_map_vertical_halves():
    feats, _ = _scene(1)
    pred = np.zeros(feats.shape[:2], dtype=int)
    pred[:, 5:] = 1
    models = fit_class_models(feats, pred, "pcs", {"n_components": 2})
    out = open_set_score_map(models, feats, pred)
    left = models.models[0].score_samples(feats[:, :5].reshape(-1, 3)).reshape(12, 5)
    right = models.models[1].score_samples(feats[:, 5:].reshape(-1, 3)).reshape(12, 5)
    np.testing.assert_array_equal(out[:, :5], left)
    np.testing.assert_array_equal(out[:, 5:], right)


@pytest.mark.parametrize("kind", ["gmm", "pcs"])
def test_score_map_matches_per_pixel_lookup(kind):
    feats, gt = _scene(2)
    params = {"n_components": 2}
    models = fit_class_models(feats, gt, kind, params, seed=3)
    pred = np.random.default_rng(9).integers(0, 3, size=gt.shape)
    pred[0, 0] = UNKNOWN
    pred[1, 1] = IGNORE
    out = open_set_score_map(models, feats, pred)
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            c = pred[y, x]
            if c < 0:
                assert out[y, x] == -np.inf
            else:
                ref = models.models[c].score_samples(feats[y, x][None])[0]
                assert out[y, x] == pytest.approx(ref, abs=1e-10)


def test_score_map_combine_max_and_errors():
    feats, gt = _scene(3)
    models = fit_class_models(feats, gt, "gmm", {"n_components": 1})
    best = open_set_score_map(models, feats, gt, combine="max")
    assert np.all(best >= open_set_score_map(models, feats, gt) - 1e-12)
    with pytest.raises(ValidationError):
        open_set_score_map(models, feats, gt, combine="mean")
    bad = gt.copy()
    bad[0, 0] = 7
    with pytest.raises(ValidationError):
        open_set_score_map(models, feats, bad)
    with pytest.raises(ValidationError):
        open_set_score_map(models, feats[..., :2], gt)


def test_fit_class_models_ignores_sentinels():
    feats, gt = _scene(4)
    masked = gt.copy()
    masked[:3] = IGNORE
    masked[3, :] = UNKNOWN
    spoiled = feats.copy()
    spoiled[:4] = 1e6
    a = fit_class_models(spoiled, masked, "gmm", {"n_components": 1})
    keep = masked >= 0
    for c in range(3):
        np.testing.assert_allclose(a.models[c].means_[0], feats[keep & (gt == c)].mean(axis=0),
                                   atol=1e-10)
    assert sorted(a.models) == [0, 1, 2]


def test_fit_class_models_recovers_generator_means():
    rng = np.random.default_rng(5)
    gt = np.repeat(np.arange(4), 2500).reshape(100, 100)
    means = rng.normal(size=(4, 6)) * 3
    feats = means[gt] + 0.5 * rng.normal(size=(100, 100, 6))
    models = fit_class_models(feats, gt, "gmm", {"n_components": 1})
    for c in range(4):
        assert np.abs(models.models[c].means_[0] - means[c]).max() < 0.1
    pcs = fit_class_models(feats, gt, "pcs", {"n_components": 3})
    for c in range(4):
        assert np.abs(pcs.models[c].mean_ - means[c]).max() < 0.1


def test_fit_class_models_subsample_and_errors():
    feats, gt = _scene(6, h=30, w=30)
    models = fit_class_models(feats, gt, "gmm", {"n_components": 1}, max_samples_per_class=50)
    assert all(n == 50 for n in models.metadata["n_samples"].values())
    again = fit_class_models(feats, gt, "gmm", {"n_components": 1}, max_samples_per_class=50)
    assert np.array_equal(models.models[0].means_, again.models[0].means_)
    tiny = np.full(gt.shape, IGNORE)
    tiny[0, 0] = 0
    with pytest.raises(ValidationError):
        fit_class_models(feats, tiny, "gmm", {"n_components": 2})
    with pytest.raises(ValidationError):
        fit_class_models(feats, np.full(gt.shape, IGNORE), "gmm")
    with pytest.raises(ValidationError):
        fit_class_models(feats, gt, "svm")


@pytest.mark.parametrize("kind", ["gmm", "pcs"])
def test_class_model_set_round_trip(tmp_path, kind):
    feats, gt = _scene(7)
    models = fit_class_models(feats, gt, kind, {"n_components": 2}, seed=11)
    path = tmp_path / "models.json"
    models.save(path)
    loaded = ClassModelSet.load(path)
    assert loaded.kind == kind and loaded.seed == 11 and loaded.dim == 3
    np.testing.assert_array_equal(open_set_score_map(loaded, feats, gt),
                                  open_set_score_map(models, feats, gt))
    doc = models.to_dict()
    doc["version"] = 99
    with pytest.raises(ValidationError):
        ClassModelSet.from_dict(doc)


def test_open_set_scorer_estimator():
    feats, gt = _scene(8)
    scorer = OpenSetScorer(kind="gmm", n_components=2, random_state=4).fit(feats, gt)
    ref = open_set_score_map(fit_class_models(feats, gt, "gmm", scorer._density_params(), 4),
                             feats, gt)
    np.testing.assert_array_equal(scorer.score_map(feats, gt), ref)
    assert scorer.get_params()["kind"] == "gmm"
