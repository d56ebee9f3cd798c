import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import crandn, rel
from kdeq.grid import (PSNR_PERFECT, GridError, as_grid, coil_combine_rss, fft_centered,
                       ifft_centered, metrics, ssim)

dims = st.tuples(st.integers(1, 64), st.integers(1, 64), st.integers(1, 8))


@settings(max_examples=30, deadline=None)
@given(dims, st.integers(0, 2**32 - 1))
def test_unitarity_and_roundtrip(shape, seed):
    x = crandn(np.random.default_rng(seed), shape)
    k = fft_centered(x)
    assert abs(np.linalg.norm(k) - np.linalg.norm(x)) <= 1e-12 * np.linalg.norm(x)
    assert rel(ifft_centered(k), x) <= 1e-12
    assert rel(fft_centered(ifft_centered(x)), x) <= 1e-12


def test_two_point_dft_centers_dc():
    x = np.array([1.0, 1.0]).reshape(1, 2, 1)
    k = fft_centered(x)
    np.testing.assert_allclose(k.ravel(), [0.0, np.sqrt(2.0)], atol=1e-15)


def test_direction_argument():
    x = crandn(np.random.default_rng(0), (4, 6, 2))
    np.testing.assert_array_equal(fft_centered(x, "inverse"), ifft_centered(x))
    with pytest.raises(ValueError):
        fft_centered(x, "sideways")


@pytest.mark.parametrize("bad", [np.zeros(4), np.zeros((2, 2, 2, 2)), np.zeros((0, 4, 1)),
                                 np.full((2, 2, 1), np.nan), np.full((2, 2, 1), np.inf)])
def test_invalid_grids_rejected(bad):
    with pytest.raises(GridError):
        as_grid(bad)


def test_rss_examples():
    img = np.array([3.0, 4.0j]).reshape(1, 1, 2)
    assert coil_combine_rss(img)[0, 0] == pytest.approx(5.0)
    x = crandn(np.random.default_rng(1), (5, 4, 1))
    np.testing.assert_allclose(coil_combine_rss(x), np.abs(x[:, :, 0]))
    assert not coil_combine_rss(np.zeros((3, 3, 4))).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_rss_phase_invariance(seed, nc):
    rng = np.random.default_rng(seed)
    x = crandn(rng, (9, 7, nc))
    phase = np.exp(1j * rng.uniform(0, 2 * np.pi, nc))
    assert rel(coil_combine_rss(x * phase), coil_combine_rss(x)) <= 1e-12


def test_metrics_identity_uses_sentinel():
    ref = np.abs(crandn(np.random.default_rng(2), (16, 16, 1)))[:, :, 0]
    m = metrics(ref, ref)
    assert m.nmse == 0.0
    assert m.psnr == PSNR_PERFECT == np.inf
    assert m.ssim == pytest.approx(1.0, abs=1e-12)


def test_metrics_hand_values():
    assert metrics(np.array([[1.0, 0.0]]), np.zeros((1, 2))).nmse == pytest.approx(1.0)
    ref = np.zeros((4, 4))
    ref[0, 0] = 1.0
    rec = ref + 0.1  # every entry off by 0.1, MSE 0.01
    assert metrics(ref, rec).psnr == pytest.approx(20.0, abs=1e-10)


def test_metrics_errors():
    with pytest.raises(ValueError):
        metrics(np.ones((3, 3)), np.ones((3, 4)))
    with pytest.raises(ValueError):
        metrics(np.zeros((3, 3)), np.ones((3, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_nmse_scale_covariant(seed, alpha):
    rng = np.random.default_rng(seed)
    ref, rec = rng.random((12, 10)), rng.random((12, 10))
    a = metrics(ref, rec).nmse
    assert metrics(alpha * ref, alpha * rec).nmse == pytest.approx(a, rel=1e-12)
    assert metrics(ref.T, rec.T).nmse == pytest.approx(a, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_scikit_image(seed):
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(seed)
    ref = rng.random((32, 28))
    rec = ref + 0.1 * rng.standard_normal(ref.shape)
    expected = skm.structural_similarity(ref, rec, gaussian_weights=True, sigma=1.5,
                                         use_sample_covariance=False, data_range=ref.max())
    assert ssim(ref, rec) == pytest.approx(expected, abs=1e-10)
