# =============================================================================
# IMAGE METRICS - evaluation/image.py
# =============================================================================
# PSNR and SSIM for float images in [0, 1]. SSIM uses an 11x11 Gaussian
# window (sigma 1.5), K1 = 0.01, K2 = 0.03, averaged over channels.
# =============================================================================

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from config import PSNR_CAP
from errors import InvalidArgumentError

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class ImageMetrics:
    psnr: float
    ssim: float

    def as_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim}


def _check_pair(rendered, reference):
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise InvalidArgumentError("images must be (H, W) or (H, W, C)")
    return a, b


def mse_to_psnr(mse, cap=PSNR_CAP):
    if mse <= 0:
        return cap
    return float(min(cap, -10.0 * np.log10(mse)))


def psnr(rendered, reference, cap=PSNR_CAP):
    a, b = _check_pair(rendered, reference)
    return mse_to_psnr(float(np.mean((a - b) ** 2)), cap)


def _ssim_channel(x, y):
    blur = lambda img: gaussian_filter(img, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ssim(rendered, reference):
    a, b = _check_pair(rendered, reference)
    if a.ndim == 2:
        return _ssim_channel(a, b)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[-1])]))


def image_metrics(rendered, reference, cap=PSNR_CAP):
    """
    Args:
        rendered, reference: Same-shape images with values in [0, 1].

    Returns:
        ImageMetrics
    """
    return ImageMetrics(psnr(rendered, reference, cap), ssim(rendered, reference))
