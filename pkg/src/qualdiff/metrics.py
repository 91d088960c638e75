"""PSNR and windowed SSIM for images in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError

SSIM_WINDOW = 8
C1 = 0.01**2
C2 = 0.03**2


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InvalidInputError("empty image")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; identical images give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid ``window x window`` windows, averaged across channels.

    Window statistics are unweighted population moments.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise InvalidInputError(f"image smaller than the {window}x{window} window")
    wa = sliding_window_view(a, (window, window), axis=(0, 1))
    wb = sliding_window_view(b, (window, window), axis=(0, 1))
    mx, my = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    sxx = wa.var(axis=(-2, -1))
    syy = wb.var(axis=(-2, -1))
    sxy = ((wa - mx[..., None, None]) * (wb - my[..., None, None])).mean(axis=(-2, -1))
    s = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx**2 + my**2 + C1) * (sxx + syy + C2))
    return float(s.mean())
