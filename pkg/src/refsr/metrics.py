"""Image and correspondence metrics.

Float images are quantized to 8 bits (round-half-up) before PSNR/SSIM. The
luma channel uses full-range BT.601 weights ``Y = 0.299 R + 0.587 G + 0.114 B``
on the 0..255 scale. No border pixels are shaved.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .imageio import quantize

Y_WEIGHTS = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


def _as_8bit(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    return quantize(arr).astype(np.float64)


def rgb_to_y(img) -> np.ndarray:
    """``(H, W, 3)`` 0..255 RGB to ``(H, W, 1)`` luma (single-channel input passes through)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[-1] == 1:
        return arr
    return (arr @ Y_WEIGHTS)[..., None]


def _prepare(a, b, mode: str):
    if mode not in ("Y", "RGB"):
        raise MetricError(f"mode must be 'Y' or 'RGB', got {mode!r}")
    a8, b8 = _as_8bit(a), _as_8bit(b)
    if a8.shape != b8.shape:
        raise MetricError(f"shape mismatch: {a8.shape} vs {b8.shape}")
    if mode == "Y":
        a8, b8 = rgb_to_y(a8), rgb_to_y(b8)
    return a8, b8


def psnr(a, b, mode: str = "Y") -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    x, y = _prepare(a, b, mode)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    g = gaussian_window()
    c1 = (SSIM_K1 * 255) ** 2
    c2 = (SSIM_K2 * 255) ** 2
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, mode: str = "Y") -> float:
    """Mean structural similarity over all fully-inside 11x11 windows (channels averaged)."""
    x, y = _prepare(a, b, mode)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise MetricError(f"image {x.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([ssim_channel(x[..., c], y[..., c]) for c in range(x.shape[-1])]))


def aee(pred, gt, valid=None) -> float:
    """Average end-point error (grid cells) over valid cells.

    ``pred`` is a :class:`~refsr.descriptors.CorrespondenceField` or an
    ``(h, w, 2)`` array of target coordinates; ``gt`` the same shape.
    """
    targets = getattr(pred, "targets", pred)
    p = np.asarray(targets, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise MetricError(f"lattice mismatch: {p.shape} vs {g.shape}")
    mask = np.ones(p.shape[:-1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not mask.any():
        raise MetricError("no valid cells")
    return float(np.linalg.norm(p - g, axis=-1)[mask].mean())
