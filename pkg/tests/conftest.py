"""Shared fixtures: synthetic natural images and brute-force oracles."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from dbdl.imaging import Image

ACCEPTANCE_RESULTS = []


def record_acceptance(name: str, ok: bool, detail: str):
    ACCEPTANCE_RESULTS.append((name, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {name}: {detail}")


def make_natural_image(h: int, w: int, seed: int) -> Image:
    """Deterministic natural-looking fixture: smooth texture plus hard edges."""
    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.standard_normal((h, w)), sigma=3.0, mode="reflect")
    img = img / (np.abs(img).max() + 1e-12)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(6):
        r0 = int(rng.integers(0, h - 8))
        c0 = int(rng.integers(0, w - 8))
        rh = int(rng.integers(4, 14))
        cw = int(rng.integers(4, 14))
        img[r0:r0 + rh, c0:c0 + cw] += rng.uniform(-0.8, 0.8)
    cy, cx, rad = h / 2, w / 2, min(h, w) / 5
    img = img + 0.5 * (((yy - cy) ** 2 + (xx - cx) ** 2) < rad ** 2)
    img = (img - img.min()) / (img.max() - img.min())
    return Image(0.05 + 0.9 * img)


def make_striped_image(h: int, w: int, seed: int) -> Image:
    """Fixture with stripe gratings at 5-8 px periods, shapes and texture.

    Gaussian blur attenuates these periods strongly without destroying
    them, which is the regime where learned deblurring can beat the
    blurred input.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = 0.35 + 0.3 * gaussian_filter(rng.standard_normal((h, w)),
                                       sigma=6.0, mode="reflect")
    for _ in range(6):
        r0 = int(rng.integers(0, h - 20))
        c0 = int(rng.integers(0, w - 20))
        r1 = min(h, r0 + int(rng.integers(14, 30)))
        c1 = min(w, c0 + int(rng.integers(14, 30)))
        period = float(rng.integers(5, 9))
        kind = rng.integers(0, 3)
        if kind == 0:
            pat = 0.5 + 0.42 * np.sign(np.sin(2 * np.pi * xx[r0:r1, c0:c1] / period))
        elif kind == 1:
            pat = 0.5 + 0.42 * np.sign(np.sin(2 * np.pi * yy[r0:r1, c0:c1] / period))
        else:
            diag = xx[r0:r1, c0:c1] + yy[r0:r1, c0:c1]
            pat = 0.5 + 0.42 * np.sign(np.sin(2 * np.pi * diag / (period * 1.4)))
        img[r0:r1, c0:c1] = pat
    for _ in range(3):
        r0 = int(rng.integers(0, h - 12))
        c0 = int(rng.integers(0, w - 12))
        img[r0:r0 + int(rng.integers(6, 14)),
            c0:c0 + int(rng.integers(6, 14))] = rng.uniform(0.05, 0.95)
    return Image(np.clip(img, 0.0, 1.0))


def brute_force_narrow_convolve(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Reference narrow convolution: explicit nested loops, no vectorization."""
    h, w = arr.shape
    kh, kw = kernel.shape
    out = np.zeros((h - kh + 1, w - kw + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            acc = 0.0
            for u in range(kh):
                for v in range(kw):
                    acc += kernel[u, v] * arr[i + u, j + v]
            out[i, j] = acc
    return out


@pytest.fixture
def natural_image():
    return make_natural_image(64, 64, seed=7)
