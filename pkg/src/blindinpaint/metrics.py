"""Evaluation metrics on [0, 1] images.

Images are ``(h, w)`` or ``(h, w, c)`` arrays (numpy or torch).  Use
:func:`to_unit` to map network outputs from [-1, 1] first.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
DELTA = 1e-6


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def to_unit(x) -> np.ndarray:
    return (_np(x) + 1.0) / 2.0


def eval_bce(pred, mask, delta: float = DELTA) -> float:
    """Unweighted mean per-pixel binary cross entropy (natural log)."""
    p = np.clip(_np(pred), delta, 1 - delta)
    m = _np(mask)
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {m.shape}")
    return float(np.mean(-(m * np.log(p) + (1 - m) * np.log(1 - p))))


def psnr(a, b) -> float:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:-r, r:-r] if r else y


def ssim(a, b, win: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Single-scale SSIM: Gaussian window, mean over fully-valid windows, channel-averaged."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < win:
        raise ValueError(f"image {a.shape[:2]} smaller than the {win}px window")
    g = _window(win, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    scores = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def binarize_mask(pred, threshold: float = 0.5) -> np.ndarray:
    """1 where ``pred >= threshold`` (ties count as damaged), else 0."""
    return (_np(pred) >= threshold).astype(np.float32)
