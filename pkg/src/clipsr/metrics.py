"""PSNR, SSIM and region colour probes on ``[0, 1]`` images."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError
from .imaging import as_pixels

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.299, 0.587, 0.114])


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` in dB, capped at 99 dB for identical inputs."""
    a, b = as_pixels(a), as_pixels(b)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def luminance(img) -> np.ndarray:
    px = as_pixels(img)
    return px @ LUMA if px.ndim == 3 else px


def ssim(a, b) -> float:
    """Mean SSIM of the luminance channels over all valid 11x11 windows."""
    ya, yb = luminance(a), luminance(b)
    _check_same(ya, yb)
    if ya.shape[0] < SSIM_WINDOW or ya.shape[1] < SSIM_WINDOW:
        raise InputError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {ya.shape}")
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    saa = _filter_valid(ya * ya, g) - mu_a * mu_a
    sbb = _filter_valid(yb * yb, g) - mu_b * mu_b
    sab = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def region_mean_color(img, bbox) -> np.ndarray:
    """Per-channel mean over ``bbox = (top, left, bottom, right)``, ends exclusive."""
    px = as_pixels(img)
    top, left, bottom, right = (int(v) for v in bbox)
    h, w = px.shape[:2]
    if not (0 <= top < bottom <= h and 0 <= left < right <= w):
        raise InputError(f"bbox {bbox} outside {h}x{w} image")
    return px[top:bottom, left:right].reshape(-1, 3).mean(axis=0)
