"""PSNR and SSIM on [0,1] images shaped (C,H,W)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # img (C,H,W) -> (C,H-k+1,W-k+1)
    return np.einsum("chwij,ij->chw", sliding_window_view(img, win.shape, axis=(1, 2)), win)


def ssim(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale Gaussian-window SSIM, mean over channels and valid positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[1:]) < size:
        raise ValueError(f"image {a.shape[1:]} smaller than the {size}x{size} window")
    win = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def stereo_scores(out_l, out_r, gt_l, gt_r) -> dict:
    """Per-view and view-averaged PSNR/SSIM for one stereo pair."""
    p_l, p_r = psnr(out_l, gt_l), psnr(out_r, gt_r)
    s_l, s_r = ssim(out_l, gt_l), ssim(out_r, gt_r)
    return {"psnr_l": p_l, "psnr_r": p_r, "psnr_avg": 0.5 * (p_l + p_r),
            "ssim_l": s_l, "ssim_r": s_r, "ssim_avg": 0.5 * (s_l + s_r)}
