"""Photometric loss on rendered images: mean absolute error plus D-SSIM.

Both terms come with hand-derived gradients w.r.t. the rendered image; the
D-SSIM backward differentiates through the gaussian-window statistics and is
validated against finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_WINDOW_RADIUS = 5
_WINDOW_SIGMA = 1.5


def _window() -> np.ndarray:
    i = np.arange(-_WINDOW_RADIUS, _WINDOW_RADIUS + 1, dtype=np.float64)
    g = np.exp(-(i * i) / (2.0 * _WINDOW_SIGMA ** 2))
    return g / g.sum()


_G = _window()


def _blur(img: np.ndarray) -> np.ndarray:
    # Symmetric kernel + zero padding: the operator is self-adjoint, which the
    # backward pass relies on.
    out = correlate1d(img, _G, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _G, axis=1, mode="constant", cval=0.0)


def l1_loss(img: np.ndarray, gt: np.ndarray):
    """Mean absolute error over pixels and channels, with gradient."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    diff = img - gt
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


def dssim_loss(img: np.ndarray, gt: np.ndarray):
    """Structural dissimilarity (1 - SSIM) / 2 with analytic gradient.

    SSIM uses an 11-tap gaussian window per channel; the mean runs over every
    pixel and channel.
    """
    x = np.asarray(img, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    n = x.size
    mu_x, mu_y = _blur(x), _blur(y)
    gx2, gy2, gxy = _blur(x * x), _blur(y * y), _blur(x * y)
    var_x = gx2 - mu_x * mu_x
    var_y = gy2 - mu_y * mu_y
    cov = gxy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    S = (a1 * a2) / (b1 * b2)
    value = float((1.0 - np.mean(S)) / 2.0)

    inv_bb = 1.0 / (b1 * b2)
    dS_dgx2 = -S / b2
    dS_dgxy = 2 * a1 * inv_bb
    dS_dmux = 2 * mu_y * (a2 - a1) * inv_bb + 2 * mu_x * S * (1.0 / b2 - 1.0 / b1)
    dmean = _blur(dS_dmux) + 2 * x * _blur(dS_dgx2) + y * _blur(dS_dgxy)
    grad = -dmean / (2.0 * n)
    return value, grad


def rgb_loss(img: np.ndarray, gt: np.ndarray, lambda_ssim: float = 0.2):
    """(1 - lambda_ssim) * L1 + lambda_ssim * D-SSIM, plus d(loss)/d(img)."""
    v1, g1 = l1_loss(img, gt)
    if lambda_ssim == 0.0:
        return v1, g1
    v2, g2 = dssim_loss(img, gt)
    return (1.0 - lambda_ssim) * v1 + lambda_ssim * v2, (1.0 - lambda_ssim) * g1 + lambda_ssim * g2
