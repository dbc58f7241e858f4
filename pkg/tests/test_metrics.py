import numpy as np
import pytest

from pnphvae.core_math import ImageGrid
from pnphvae.metrics import PSNR_CAP, psnr, ssim, ssim_report


def test_psnr_examples():
    a = np.zeros((4, 4))
    assert psnr(a, np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(a, a) == PSNR_CAP
    b = a.copy()
    b[0, 0] = 0.1
    # one wrong pixel out of 16 at error 0.1 -> MSE 6.25e-4
    assert psnr(a, b) == pytest.approx(10 * np.log10(1 / 6.25e-4))
    assert psnr(ImageGrid(a), b) == psnr(a, b)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        psnr(np.zeros(2), np.zeros(2), peak=0)


def test_ssim_identical_and_constant():
    x = np.random.default_rng(0).random((20, 20))
    assert ssim(x, x) == pytest.approx(1.0)
    c = np.full((16, 16), 0.3)
    assert ssim(c, c) == pytest.approx(1.0)


def test_ssim_inverted_checkerboard_is_pinned():
    x = (np.indices((32, 32)).sum(0) // 4 % 2).astype(float)
    assert ssim(x, 1 - x) == pytest.approx(-0.8982907202946382, abs=1e-12)
    assert ssim(x, 1 - x) < 0.2


def test_ssim_matches_reference_implementation():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(1)
    a = rng.random((24, 30))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = skm.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=True,
                                    data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)
    c = rng.random((16, 16, 3))
    d = np.clip(c + 0.05 * rng.standard_normal(c.shape), 0, 1)
    ref = skm.structural_similarity(c, d, gaussian_weights=True, sigma=1.5, use_sample_covariance=True,
                                    data_range=1.0, channel_axis=2)
    assert ssim(c, d) == pytest.approx(ref, abs=1e-10)


def test_ssim_small_image_falls_back_to_global():
    rng = np.random.default_rng(2)
    a = rng.random((8, 8))
    r = ssim_report(a, a * 0.9)
    assert r.global_fallback and -1 <= r.value <= 1
    assert not ssim_report(rng.random((11, 11)), rng.random((11, 11))).global_fallback
