"""Image helpers shared by every stage.

Images travel through the library as ``float32`` numpy arrays of shape
``(H, W, C)`` with values in ``[0, 1]``. 8-bit integers only appear at the
PNG boundary and in the metric code.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class ImageShapeError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an image array and return it as float32 ``(H, W, C)``."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] not in (1, 3):
        raise ImageShapeError(f"expected an HxWxC image with C in {{1, 3}}, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ImageShapeError("image contains non-finite values")
    return arr


def quantize(img: np.ndarray) -> np.ndarray:
    """Float ``[0, 1]`` image to uint8 with round-half-up."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr
    arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def read_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write an image atomically (temp file then rename)."""
    path = Path(path)
    arr = quantize(check_image(img))
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(arr, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, C)`` array to a ``(1, C, H, W)`` tensor."""
    arr = check_image(img)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)[None]


def to_image(t: torch.Tensor) -> np.ndarray:
    """``(1, C, H, W)`` or ``(C, H, W)`` tensor to an ``(H, W, C)`` float32 array."""
    t = t.detach()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ImageShapeError("to_image expects a single image")
        t = t[0]
    return t.permute(1, 2, 0).to(torch.float32).cpu().numpy()


def crop_to_multiple(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % factor, : w - w % factor]
