import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from refsr.metrics import MetricError, aee, psnr, rgb_to_y, ssim


@given(st.integers(1, 200))
def test_constant_offset_psnr(k):
    a = np.full((8, 8, 3), 20, np.uint8)
    b = a + np.uint8(k) if k < 236 else a
    if k >= 236:
        return
    for mode in ("Y", "RGB"):
        assert abs(psnr(a, b, mode) - 20 * math.log10(255 / k)) <= 1e-9


def test_identical_images():
    a = np.random.default_rng(0).random((16, 16, 3))
    assert psnr(a, a) == math.inf
    assert ssim(a, a) == 1.0
    assert ssim(a, a, "RGB") == 1.0


def test_quantization_before_comparison():
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a + 1e-4) == math.inf


def test_luma_weights():
    px = np.array([[[255.0, 0.0, 0.0]]])
    assert rgb_to_y(px)[0, 0, 0] == pytest.approx(0.299 * 255)


def test_ssim_against_independent_implementation(rng):
    from scipy.ndimage import gaussian_filter
    a = rng.random((32, 32, 1))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    x = np.floor(a * 255 + 0.5)[..., 0]
    y = np.floor(b * 255 + 0.5)[..., 0]

    def f(z):
        return gaussian_filter(z, 1.5, truncate=5 / 1.5, mode="constant")[5:-5, 5:-5]
    mx, my = f(x), f(y)
    sxx, syy, sxy = f(x * x) - mx ** 2, f(y * y) - my ** 2, f(x * y) - mx * my
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    ref = np.mean((2 * mx * my + c1) * (2 * sxy + c2) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)))
    assert ssim(a, b, "RGB") == pytest.approx(ref, abs=1e-9)


def test_ssim_decreases_with_noise(rng):
    a = rng.random((24, 24, 3))
    s = [ssim(a, np.clip(a + rng.normal(0, sd, a.shape), 0, 1)) for sd in (0.01, 0.05, 0.2)]
    assert s[0] > s[1] > s[2]


def test_aee_analytic_cases():
    gt = np.zeros((2, 2, 2))
    assert aee(gt, gt) == 0.0
    assert aee(gt + [3.0, 4.0], gt) == 5.0
    pred = gt.copy()
    pred[0, 0] = [6, 8]
    assert aee(pred, gt) == 2.5
    assert aee(pred, gt, np.array([[True, False], [False, False]])) == 10.0


def test_metric_errors():
    with pytest.raises(MetricError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(MetricError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), "L")
    with pytest.raises(MetricError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))
    with pytest.raises(MetricError):
        aee(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2), bool))
