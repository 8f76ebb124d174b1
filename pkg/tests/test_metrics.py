import math

import numpy as np
import pytest

from dbdl.blur import build_blur_matrix
from dbdl.imaging import GaussianKernelSpec, Image, gaussian_kernel, narrow_convolve
from dbdl.metrics import (MetricReport, blur_error_db, laplace_variance, psnr,
                          sobel_variance, ssim)

from conftest import make_natural_image


class TestPsnr:
    def test_identical_images_inf(self, natural_image):
        assert psnr(natural_image, natural_image) == math.inf

    def test_known_mse(self):
        a = Image(np.zeros((10, 10)))
        b = Image(np.full((10, 10), 0.1))   # MSE = 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_full_scale_difference(self):
        a = Image(np.zeros((5, 5)))
        b = Image(np.ones((5, 5)))
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_exact(self):
        rng = np.random.default_rng(0)
        a = Image(rng.random((8, 9)))
        b = Image(rng.random((8, 9)))
        assert psnr(a, b) == psnr(b, a)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            psnr(Image(np.zeros((4, 4))), Image(np.zeros((5, 4))))


class TestSsim:
    def test_identical_images(self, natural_image):
        assert ssim(natural_image, natural_image) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_images(self):
        a = Image(np.full((16, 16), 0.5))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_mid_contrast_image(self):
        rng = np.random.default_rng(1)
        base = 0.25 + 0.5 * rng.random((32, 32))
        a = Image(base)
        b = Image(1.0 - base)
        assert ssim(a, b) < 0.2

    def test_matches_reference_implementation(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.random((24, 30))
            b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
            ours = ssim(Image(a), Image(b))
            ref = skimage.structural_similarity(
                a, b, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=1.0)
            assert ours == pytest.approx(ref, abs=1e-9)

    def test_too_small_image(self):
        with pytest.raises(ValueError):
            ssim(Image(np.zeros((8, 8))), Image(np.zeros((8, 8))))


class TestEdgeVariances:
    def test_constant_image_zero(self):
        img = Image(np.full((12, 12), 0.7))
        assert sobel_variance(img) == 0.0
        assert laplace_variance(img) == 0.0

    def test_sharp_exceeds_blurred(self, natural_image):
        kern = gaussian_kernel(GaussianKernelSpec(5, 1.5))
        blurred = narrow_convolve(natural_image, kern)
        assert sobel_variance(natural_image) > sobel_variance(blurred)
        assert laplace_variance(natural_image) > laplace_variance(blurred)

    def test_translation_invariance_on_wrapped_pattern(self):
        # bandlimited periodic noise rolls seamlessly; on an image this large
        # the interior dominates and shifts barely move the statistics
        dim = 256
        rng = np.random.default_rng(5)
        spec = np.fft.fft2(rng.standard_normal((dim, dim)))
        fy = np.fft.fftfreq(dim)[:, None]
        fx = np.fft.fftfreq(dim)[None, :]
        field = np.real(np.fft.ifft2(spec * ((fy ** 2 + fx ** 2) <= 0.25 ** 2)))
        field = (field - field.min()) / (field.max() - field.min())
        pattern = 0.1 + 0.8 * field
        base_s = sobel_variance(Image(pattern))
        base_l = laplace_variance(Image(pattern))
        for shift in [(1, 3), (7, 2), (10, 10), (31, 17)]:
            rolled = Image(np.roll(pattern, shift, axis=(0, 1)))
            assert abs(sobel_variance(rolled) - base_s) < 0.01 * base_s
            assert abs(laplace_variance(rolled) - base_l) < 0.01 * base_l

    def test_natural_image_sobel_scale(self, natural_image):
        # order-of-magnitude anchor: thousands on [0,255]-scaled intensities
        v = sobel_variance(natural_image)
        assert 3e2 < v < 3e4

    def test_too_small(self):
        with pytest.raises(ValueError):
            sobel_variance(Image(np.zeros((2, 5))))


class TestBlurErrorDb:
    def test_identical_matrices(self):
        B = build_blur_matrix(gaussian_kernel(GaussianKernelSpec(3, 1.0)), 6)
        assert blur_error_db(B, B.dense) == -math.inf

    def test_zero_estimate(self):
        B = build_blur_matrix(gaussian_kernel(GaussianKernelSpec(3, 1.0)), 6)
        assert blur_error_db(np.zeros_like(B.dense), B) == pytest.approx(0.0, abs=1e-12)

    def test_known_scale(self):
        rng = np.random.default_rng(3)
        B = rng.standard_normal((6, 9))
        est = B + 0.01 * B   # relative error 0.01 -> -40 dB
        assert blur_error_db(est, B) == pytest.approx(-40.0, abs=1e-9)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            blur_error_db(np.zeros((3, 3)), np.zeros((4, 4)))


class TestMetricReport:
    def test_text_rendering_skips_missing(self):
        rep = MetricReport(psnr=20.0, sobel_var=123.0)
        text = rep.to_text()
        assert "psnr=20.0" in text and "sobel_var=123.0" in text
        assert "ssim" not in text
