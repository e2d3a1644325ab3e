"""Image quality measures and the denoising interior-condition check."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import uniform_filter

from . import huber
from .grids import ImageGrid, grad_forward


def _pair(u: ImageGrid, f0: ImageGrid) -> tuple[np.ndarray, np.ndarray]:
    if u.shape != f0.shape:
        raise ValueError("images differ in shape")
    return u.values, f0.values


def snr(u: ImageGrid, f0: ImageGrid) -> float:
    """Signal-to-noise ratio 20*log10(||f0|| / ||u - f0||) in dB."""
    a, b = _pair(u, f0)
    err = float(np.sum((a - b) ** 2))
    if err == 0.0:
        return math.inf
    sig = float(np.sum(b * b))
    return 10.0 * math.log10(sig / err)


def psnr(u: ImageGrid, f0: ImageGrid, peak: float = 1.0) -> float:
    a, b = _pair(u, f0)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(u: ImageGrid, f0: ImageGrid, peak: float = 1.0, window: int = 8,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with uniform windows."""
    a, b = _pair(u, f0)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2

    def filt(x):
        return uniform_filter(x, size=window, mode="reflect")

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def tv_seminorm(u: ImageGrid, gamma: float = math.inf) -> float:
    """h^2-weighted (huberised) total variation of the forward gradient."""
    z = grad_forward(u).stack()
    return u.h ** 2 * float(np.sum(huber.huber(z, gamma)))


def interior_condition(f: ImageGrid, f0: ImageGrid, gamma: float = math.inf) -> bool:
    """Noise must raise the total variation for a positive optimal weight
    to exist; returns tv(f) > tv(f0)."""
    _pair(f, f0)
    return tv_seminorm(f, gamma) > tv_seminorm(f0, gamma)
