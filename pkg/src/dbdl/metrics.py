"""Image quality metrics: PSNR, SSIM, edge-response variances, blur error.

PSNR and SSIM assume intensities in [0, 1].  The no-reference sharpness
scores (Sobel / Laplacian variance) are computed on intensities scaled to
[0, 255] so their magnitudes are comparable across tools; the argmax
selection they drive is scale-invariant either way.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imaging import Image, valid_correlate

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
LAPLACE = np.array([[0.0, 1.0, 0.0],
                    [1.0, -4.0, 1.0],
                    [0.0, 1.0, 0.0]])


@dataclass
class MetricReport:
    """Optional-field bundle of the evaluation quantities."""

    psnr: Optional[float] = None
    ssim: Optional[float] = None
    sobel_var: Optional[float] = None
    laplace_var: Optional[float] = None
    b_error_db: Optional[float] = None

    def to_text(self) -> str:
        lines = []
        for name in ("psnr", "ssim", "sobel_var", "laplace_var", "b_error_db"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}={value!r}")
        return "\n".join(lines) + "\n"


def _check_same_dims(a: Image, b: Image):
    if a.data.shape != b.data.shape:
        raise ValueError(f"image dims differ: {a.data.shape} vs {b.data.shape}")


def psnr(a: Image, b: Image) -> float:
    """10 log10(1 / MSE) with MAX=1; +inf for identical images."""
    _check_same_dims(a, b)
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    w = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2)
               / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


def ssim(a: Image, b: Image) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) on [0,1] data."""
    _check_same_dims(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} px per side")
    w = _ssim_window()
    x, y = a.data, b.data
    mu_x = valid_correlate(x, w)
    mu_y = valid_correlate(y, w)
    xx = valid_correlate(x * x, w) - mu_x * mu_x
    yy = valid_correlate(y * y, w) - mu_y * mu_y
    xy = valid_correlate(x * y, w) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * xy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (xx + yy + SSIM_C2)
    return float(np.mean(num / den))


def sobel_variance(img: Image) -> float:
    """Variance of the Sobel gradient magnitude over interior pixels, [0,255] scale."""
    if img.height < 3 or img.width < 3:
        raise ValueError("image too small for a 3x3 filter")
    scaled = img.data * 255.0
    gx = valid_correlate(scaled, SOBEL_X)
    gy = valid_correlate(scaled, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    return float(np.var(mag))


def laplace_variance(img: Image) -> float:
    """Variance of the 4-neighbor Laplacian response over interior pixels."""
    if img.height < 3 or img.width < 3:
        raise ValueError("image too small for a 3x3 filter")
    resp = valid_correlate(img.data * 255.0, LAPLACE)
    return float(np.var(resp))


def blur_error_db(B_est, B_true) -> float:
    """Relative Frobenius error in dB: 20 log10(||est-true||_F / ||true||_F)."""
    est = B_est.dense if hasattr(B_est, "dense") else np.asarray(B_est, dtype=np.float64)
    true = B_true.dense if hasattr(B_true, "dense") else np.asarray(B_true, dtype=np.float64)
    if est.shape != true.shape:
        raise ValueError(f"matrix dims differ: {est.shape} vs {true.shape}")
    err = np.linalg.norm(est - true)
    ref = np.linalg.norm(true)
    if err == 0.0:
        return -math.inf
    return 20.0 * math.log10(err / ref)
