import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from carfield import metrics


def images(seed, shape=(40, 48, 3)):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, size=shape)
    b = np.clip(a + rng.normal(0, 0.1, size=shape), 0, 1)
    return a, b


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_matches_skimage(seed):
    a, b = images(seed)
    ref = structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0, channel_axis=-1
    )
    assert metrics.ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_psnr_matches_skimage():
    a, b = images(1)
    assert metrics.psnr(b, a) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), rel=1e-12)


def test_identical_images():
    a, _ = images(2)
    assert math.isinf(metrics.psnr(a, a))
    assert metrics.ssim(a, a) == pytest.approx(1.0)
    rep = metrics.evaluate("x", a, a)
    assert rep.psnr is None and rep.psnr_infinite and rep.mask_mode == "full"


def test_foreground_metrics_ignore_background():
    a, b = images(3)
    mask = np.zeros(a.shape[:2], bool)
    mask[10:30, 12:40] = True
    b2 = b.copy()
    b2[~mask] = 0.0
    assert metrics.psnr(b, a, mask) == pytest.approx(metrics.psnr(b2, a, mask))
    assert metrics.ssim(b, a, mask) == pytest.approx(metrics.ssim(b2, a, mask))
    rep = metrics.evaluate("x", b, a, mask)
    assert rep.pixel_count == int(mask.sum()) and rep.mask_mode == "foreground"


def test_psnr_known_value():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert metrics.psnr(a, b) == pytest.approx(20.0)


def test_shape_mismatch_and_empty_mask():
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), np.zeros((4, 4), bool))
