"""Separable bicubic resampling with a pinned kernel.

The kernel is the Keys cubic with ``a = -0.5``::

    k(x) = (a + 2)|x|^3 - (a + 3)|x|^2 + 1          for |x| <= 1
         = a|x|^3 - 5a|x|^2 + 8a|x| - 4a             for 1 < |x| < 2
         = 0                                         otherwise

Output sample ``i`` sits at input coordinate ``u = (i + 0.5) / scale - 0.5``.
When shrinking (``scale < 1``) the kernel is stretched by ``1 / scale``
(antialiasing), i.e. tap ``j`` gets weight ``scale * k(scale * (u - j))``.
Taps falling outside the signal are mirrored (half-sample symmetric) and every
row of weights is renormalized to sum to one.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

CUBIC_A = -0.5


def cubic(x, a: float = CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def _weights(n_in: int, n_out: int, antialias: bool) -> np.ndarray:
    scale = n_out / n_in
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        lo, hi = int(np.floor(u - support)), int(np.ceil(u + support))
        for j in range(lo, hi + 1):
            wgt = float(cubic((u - j) / stretch)) / stretch
            if wgt == 0.0:
                continue
            jj = j
            # half-sample symmetric extension; loop handles taps beyond one reflection
            while jj < 0 or jj >= n_in:
                jj = -jj - 1 if jj < 0 else 2 * n_in - jj - 1
            mat[i, jj] += wgt
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def resize_weights(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """``(n_out, n_in)`` matrix of resampling weights (rows sum to 1)."""
    return _weights(int(n_in), int(n_out), bool(antialias)).copy()


def resize(img: np.ndarray, out_hw, antialias: bool = True) -> np.ndarray:
    """Bicubic resize of an ``(H, W, C)`` float image to ``out_hw = (H', W')``."""
    img = np.asarray(img, dtype=np.float64)
    wh = _weights(img.shape[0], out_hw[0], antialias)
    ww = _weights(img.shape[1], out_hw[1], antialias)
    out = np.einsum("ih,hwc->iwc", wh, img)
    return np.einsum("jw,iwc->ijc", ww, out).astype(np.float32)


def resize_tensor(x: torch.Tensor, out_hw, antialias: bool = True) -> torch.Tensor:
    """Same kernel on a ``(B, C, H, W)`` tensor (differentiable)."""
    wh = torch.from_numpy(_weights(x.shape[-2], out_hw[0], antialias)).to(x)
    ww = torch.from_numpy(_weights(x.shape[-1], out_hw[1], antialias)).to(x)
    return torch.einsum("ih,bchw,jw->bcij", wh, x, ww)


def bicubic_downsample(hr: np.ndarray, factor: int = 4) -> np.ndarray:
    """Antialiased bicubic shrink by an integer factor; H and W must divide evenly."""
    h, w = hr.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} is not divisible by {factor}; crop first")
    return resize(hr, (h // factor, w // factor), antialias=True)


def bicubic_upsample(lr: np.ndarray, factor: int = 4) -> np.ndarray:
    h, w = lr.shape[:2]
    return resize(lr, (h * factor, w * factor), antialias=False)


def upsample_tensor(x: torch.Tensor, factor: int = 4) -> torch.Tensor:
    return resize_tensor(x, (x.shape[-2] * factor, x.shape[-1] * factor), antialias=False)
