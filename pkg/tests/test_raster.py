from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fusskit import ValidationError
from fusskit.raster import (
    CovarianceMatrix,
    band_covariance,
    connected_components,
    gaussian_kernel,
    gaussian_smooth,
    is_4_connected,
    relabel_compact,
    segment_stats,
)

from helpers import flood_fill


# ---- gaussian_smooth

def test_smooth_sigma_zero_is_identity():
    img = np.random.default_rng(0).normal(size=(6, 7, 3))
    out = gaussian_smooth(img, 0)
    assert np.array_equal(out, img)
    assert out is not img


def test_smooth_constant_image_unchanged():
    img = np.full((9, 5, 2), 3.25)
    np.testing.assert_allclose(gaussian_smooth(img, 1.7), img, rtol=0, atol=1e-12)


def _dense_reference(band, sigma):
    # truncated normalized 2-D kernel, half-sample symmetric padding, explicit loops
    r = int(np.ceil(3 * sigma))
    x = np.arange(-r, r + 1)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k2 = np.outer(k1, k1)
    k2 /= k2.sum()
    padded = np.pad(band, r, mode="symmetric")
    h, w = band.shape
    out = np.zeros((h, w))
    for y in range(h):
        for xx in range(w):
            out[y, xx] = (padded[y:y + 2 * r + 1, xx:xx + 2 * r + 1] * k2).sum()
    return out


def test_smooth_impulse_matches_dense_convolution():
    img = np.zeros((5, 5))
    img[2, 2] = 1.0
    out = gaussian_smooth(img, 0.5)[..., 0]
    np.testing.assert_allclose(out, _dense_reference(img, 0.5), rtol=0, atol=1e-14)


@pytest.mark.parametrize("sigma", [0.5, 0.7, 1.0, 2.3])
def test_smooth_random_matches_dense_convolution(sigma):
    band = np.random.default_rng(1).normal(size=(7, 9))
    np.testing.assert_allclose(gaussian_smooth(band, sigma)[..., 0],
                               _dense_reference(band, sigma), rtol=0, atol=1e-12)


def test_kernel_radius_and_normalization():
    k = gaussian_kernel(0.5)
    assert k.size == 2 * 2 + 1
    assert abs(k.sum() - 1) < 1e-15
    assert np.allclose(k, k[::-1])


@pytest.mark.parametrize("sigma", [0.5, 1.0, 3.0])
def test_smooth_preserves_band_sums(sigma):
    img = np.random.default_rng(2).random((12, 10, 3)) * 100
    out = gaussian_smooth(img, sigma)
    np.testing.assert_allclose(out.sum(axis=(0, 1)), img.sum(axis=(0, 1)), rtol=1e-6)


@pytest.mark.parametrize("sigma", [np.nan, np.inf, -0.5])
def test_smooth_rejects_bad_sigma(sigma):
    with pytest.raises(ValidationError):
        gaussian_smooth(np.zeros((3, 3)), sigma)


def test_smooth_rejects_nonfinite_image():
    img = np.zeros((3, 3))
    img[1, 1] = np.nan
    with pytest.raises(ValidationError):
        gaussian_smooth(img, 1.0)


# ---- connected components / relabel

def test_cc_single_block():
    assert np.array_equal(connected_components([[0, 0], [0, 0]]), [[0, 0], [0, 0]])


def test_cc_diagonal_is_not_connected():
    out = connected_components([[0, 1], [1, 0]])
    assert np.array_equal(out, [[0, 1], [2, 3]])


@pytest.mark.parametrize("seed", range(5))
def test_cc_matches_flood_fill(seed):
    field = np.random.default_rng(seed).integers(0, 3, size=(16, 16))
    assert np.array_equal(connected_components(field), flood_fill(field))


def test_cc_handles_negative_labels():
    field = np.array([[-1, -1, 2], [-2, 2, 2]])
    assert np.array_equal(connected_components(field), flood_fill(field))


@settings(max_examples=60, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
              elements=st.integers(0, 3)))
def test_cc_property_matches_flood_fill(field):
    out = connected_components(field)
    assert np.array_equal(out, flood_fill(field))
    assert is_4_connected(out)


def test_relabel_examples():
    assert np.array_equal(relabel_compact([[5, 5], [9, 9]]), [[0, 0], [1, 1]])
    compact = np.array([[0, 1, 1], [2, 2, 0]])
    assert np.array_equal(relabel_compact(compact), compact)


def test_relabel_first_occurrence_order():
    assert np.array_equal(relabel_compact([[7, 3], [3, 0]]), [[0, 1], [1, 2]])


@pytest.mark.parametrize("seed", range(5))
def test_relabel_preserves_partition(seed):
    field = np.random.default_rng(seed).integers(0, 50, size=(8, 8))
    out = relabel_compact(field)
    a = field.ravel()
    b = out.ravel()
    co_in = a[:, None] == a[None, :]
    co_out = b[:, None] == b[None, :]
    assert np.array_equal(co_in, co_out)
    assert set(b.tolist()) == set(range(len(set(a.tolist()))))


def test_relabel_rejects_negative():
    with pytest.raises(ValidationError):
        relabel_compact([[0, -1]])


def test_is_4_connected():
    assert is_4_connected([[0, 0], [1, 1]])
    assert not is_4_connected([[0, 1], [1, 0]])


# ---- segment_stats

def test_stats_constant_image():
    img = np.full((4, 4, 2), 7.0)
    seg = np.repeat(np.arange(4), 4).reshape(4, 4)
    s = segment_stats(img, seg)
    assert np.array_equal(s.means, np.full((4, 2), 7.0))
    assert np.array_equal(s.medians, np.full((4, 2), 7.0))


def test_stats_lower_median():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    s = segment_stats(img, np.zeros((2, 2), dtype=int))
    assert s.means[0, 0] == 2.5
    assert s.medians[0, 0] == 2.0
    assert s.counts.tolist() == [4]


@pytest.mark.parametrize("seed", range(4))
def test_stats_match_naive_scan(seed):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(8, 8, 3))
    seg = relabel_compact(rng.integers(0, 6, size=(8, 8)))
    s = segment_stats(img, seg)
    for k in range(int(seg.max()) + 1):
        vals = [img[y, x] for y in range(8) for x in range(8) if seg[y, x] == k]
        vals = np.array(vals)
        assert s.counts[k] == len(vals)
        np.testing.assert_allclose(s.means[k], vals.mean(axis=0), rtol=1e-12)
        srt = np.sort(vals, axis=0)
        np.testing.assert_array_equal(s.medians[k], srt[(len(vals) - 1) // 2])
    assert s.counts.sum() == 64
    np.testing.assert_allclose((s.means * s.counts[:, None]).sum(axis=0),
                               img.sum(axis=(0, 1)), rtol=1e-6)


def test_stats_shape_mismatch():
    with pytest.raises(ValidationError):
        segment_stats(np.zeros((3, 3)), np.zeros((3, 4), dtype=int))


# ---- covariance

def test_covariance_constant_image_is_epsilon_identity():
    cov = band_covariance(np.full((4, 4, 3), 2.0), epsilon=0.5)
    assert np.array_equal(cov.matrix, 0.5 * np.eye(3))


def test_covariance_default_epsilon_on_constant_image():
    cov = band_covariance(np.full((4, 4, 2), 2.0))
    assert cov.epsilon == 1e-6
    np.linalg.cholesky(cov.matrix)


def test_covariance_perfect_correlation():
    b1 = np.random.default_rng(0).normal(size=(6, 6))
    img = np.stack([b1, b1], axis=2)
    cov = band_covariance(img, epsilon=1e-3)
    raw = cov.matrix - 1e-3 * np.eye(2)
    assert raw[0, 1] == pytest.approx(raw[0, 0], rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_covariance_matches_two_pass(seed):
    img = np.random.default_rng(seed).normal(size=(16, 16, 4)) * [1, 2, 3, 4]
    x = img.reshape(-1, 4)
    n = x.shape[0]
    mean = [sum(x[:, b]) / n for b in range(4)]
    ref = np.array([[sum((x[:, i] - mean[i]) * (x[:, j] - mean[j])) / (n - 1)
                     for j in range(4)] for i in range(4)])
    cov = band_covariance(img, epsilon=1e-6)
    np.testing.assert_allclose(cov.matrix, ref + 1e-6 * np.eye(4), rtol=0, atol=1e-9)
    np.testing.assert_allclose(cov.cholesky @ cov.cholesky.T, cov.matrix, atol=1e-9)


def test_covariance_default_epsilon_is_scale_aware():
    img = np.random.default_rng(0).normal(size=(10, 10, 2)) * 100
    cov = band_covariance(img)
    x = img.reshape(-1, 2)
    assert cov.epsilon == pytest.approx(1e-6 * np.trace(np.cov(x.T)) / 2, rel=1e-12)


def test_covariance_rejects_single_pixel():
    with pytest.raises(ValidationError):
        band_covariance(np.zeros((1, 1, 3)))


def test_covariance_matrix_validation():
    with pytest.raises(ValidationError):
        CovarianceMatrix.from_matrix([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValidationError):
        CovarianceMatrix.from_matrix([[1.0, 2.0], [2.0, 1.0]])
