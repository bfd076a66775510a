"""PSNR and SSIM over full images or foreground pixels."""

from __future__ import annotations

import math
from typing import Literal

import numpy as np
from pydantic import BaseModel
from scipy.ndimage import gaussian_filter

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 at sigma 1.5 -> 11 x 11 window
K1, K2 = 0.01, 0.03


class MetricReport(BaseModel):
    record_id: str
    psnr: float | None  # None when psnr_infinite
    psnr_infinite: bool = False
    ssim: float
    lpips: float | None = None  # reserved, not computed
    pixel_count: int
    mask_mode: Literal["full", "foreground"]


def _as_image(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    return a


def mse(a, b, mask=None) -> float:
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is None:
        return float(sq.mean())
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty foreground mask")
    return float(sq[m].mean())


def psnr(a, b, mask=None) -> float:
    """PSNR in dB for images in [0, 1]; ``math.inf`` for identical inputs."""
    e = mse(a, b, mask)
    if e == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / e)


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window, averaged over channels."""
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    maps = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        filt = lambda z: gaussian_filter(z, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def ssim(a, b, mask=None, data_range: float = 1.0) -> float:
    """Mean SSIM.

    Without a mask the mean skips the 5-pixel border where the window is
    truncated.  With a mask both images are zeroed outside it first and the
    map is averaged over mask pixels.
    """
    a, b = _as_image(a), _as_image(b)
    if mask is None:
        m = ssim_map(a, b, data_range)
        pad = 5
        if min(m.shape) > 2 * pad:
            m = m[pad:-pad, pad:-pad]
        return float(m.mean())
    fg = np.asarray(mask, dtype=bool)
    m = ssim_map(a * fg[..., None], b * fg[..., None], data_range)
    return float(m[fg].mean())


def evaluate(record_id: str, pred, gt, mask=None) -> MetricReport:
    p = psnr(pred, gt, mask)
    finite = math.isfinite(p)
    return MetricReport(
        record_id=record_id,
        psnr=p if finite else None,
        psnr_infinite=not finite,
        ssim=ssim(pred, gt, mask),
        pixel_count=int(np.asarray(mask, bool).sum()) if mask is not None else int(np.prod(np.shape(gt)[:2])),
        mask_mode="foreground" if mask is not None else "full",
    )
