"""Planar homographies: sampling, solving from four points, warping, ground truth.

Points are ``(x, y)`` pixel coordinates. A homography maps a pixel of the
source crop to the pixel of the warped reference it lands on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

MAX_RESAMPLE = 100


class DegenerateHomographyError(RuntimeError):
    pass


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-15:
            raise DegenerateHomographyError("bottom-right entry is zero")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateHomographyError("homography is not invertible")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    @classmethod
    def from_points(cls, src, dst) -> "Homography":
        return cls(solve_four_point(src, dst))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def apply(self, pts) -> np.ndarray:
        """Map ``(..., 2)`` points; returns float64 ``(..., 2)``."""
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        hom = flat @ self.matrix[:, :2].T + self.matrix[:, 2]
        return (hom[:, :2] / hom[:, 2:3]).reshape(pts.shape)

    def tolist(self) -> list:
        return self.matrix.tolist()


def solve_four_point(src, dst) -> np.ndarray:
    """Exact homography through four point pairs (entry ``[2, 2]`` fixed to 1)."""
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i], b[2 * i + 1] = u, v
    if not np.isfinite(np.linalg.cond(a)) or np.linalg.cond(a) > 1e14:
        raise DegenerateHomographyError("four-point system is singular")
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


@dataclass(frozen=True)
class TransformConfig:
    """Bounds for random training homographies.

    Rotation angles are drawn from ``[-rotation_deg, rotation_deg]`` and the four
    corners are then displaced independently by up to ``jitter`` times the crop size.
    """
    scale_min: float = 0.7
    scale_max: float = 1.3
    rotation_deg: float = 30.0
    jitter: float = 0.15

    def __post_init__(self):
        if not (0 < self.scale_min <= self.scale_max):
            raise ValueError("need 0 < scale_min <= scale_max")
        if self.rotation_deg < 0 or not (0 <= self.jitter < 0.5):
            raise ValueError("rotation_deg must be >= 0 and jitter in [0, 0.5)")

    @classmethod
    def identity(cls) -> "TransformConfig":
        return cls(1.0, 1.0, 0.0, 0.0)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(np.random.SeedSequence(list(seed)))
    return np.random.default_rng(seed)


def _corners(size) -> np.ndarray:
    w, h = size
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def similarity_corners(size, scale: float, angle_deg: float) -> np.ndarray:
    """Crop corners after scaling and rotating about the crop centre."""
    pts = _corners(size)
    c = pts.mean(axis=0)
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return c + scale * (pts - c) @ rot.T


def _convex(q: np.ndarray) -> bool:
    cross = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        cross.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    cross = np.array(cross)
    return bool(np.all(cross > 1e-6) or np.all(cross < -1e-6))


def sample_homography(seed, cfg: TransformConfig = TransformConfig(), size=(160, 160)) -> Homography:
    """Random scale, rotation and four-corner jitter, solved from the corner pairs.

    ``seed`` may be an int or a tuple such as ``(global_seed, pair_index)``.
    """
    rng = _rng(seed)
    src = _corners(size)
    for _ in range(MAX_RESAMPLE):
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        dst = similarity_corners(size, scale, angle)
        dst = dst + rng.uniform(-cfg.jitter, cfg.jitter, size=(4, 2)) * np.asarray(size, dtype=np.float64)
        if not _convex(dst):
            continue
        try:
            return Homography.from_points(src, dst)
        except DegenerateHomographyError:
            continue
    raise DegenerateHomographyError(f"no valid homography after {MAX_RESAMPLE} draws")


def warp_image(img: torch.Tensor, h: Homography, out_size=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Backward-warp ``(B, C, H, W)`` so that output pixel ``h(x)`` shows input pixel ``x``.

    Returns the warped image (zeros outside the source) and a ``(B, 1, H, W)`` validity mask.
    """
    b, _, hh, ww = img.shape
    ow, oh = out_size if out_size is not None else (ww, hh)
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    src = h.inverse().apply(np.stack([xs, ys], axis=-1))
    gx = 2.0 * src[..., 0] / max(ww - 1, 1) - 1.0
    gy = 2.0 * src[..., 1] / max(hh - 1, 1) - 1.0
    grid = torch.from_numpy(np.stack([gx, gy], axis=-1)).to(img.dtype)[None].expand(b, -1, -1, -1)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=True)
    inside = (src[..., 0] >= 0) & (src[..., 0] <= ww - 1) & (src[..., 1] >= 0) & (src[..., 1] <= hh - 1)
    mask = torch.from_numpy(inside).to(img.dtype)[None, None].expand(b, -1, -1, -1)
    return out, mask


def gt_correspondence(points, h: Homography, stride: int = 4, scale_factor: int = 4,
                      ref_grid_shape=None, lr_native: bool = False):
    """Ground-truth reference-grid coordinates for input-grid cells.

    By default the input grid lives on the same pixel lattice as the HR crop
    (cell ``p`` centred on HR pixel ``stride * p``). With ``lr_native`` the
    cell is centred on LR pixel ``stride * p``, i.e. HR pixel
    ``scale_factor * stride * p``.

    Returns ``(coords, valid)``; ``valid`` is all-true when ``ref_grid_shape``
    (``(h, w)``) is not given.
    """
    p = np.asarray(points, dtype=np.float64)
    pix = p * stride * (scale_factor if lr_native else 1)
    q = h.apply(pix) / stride
    if ref_grid_shape is None:
        valid = np.isfinite(q).all(axis=-1)
    else:
        rh, rw = ref_grid_shape
        valid = (q[..., 0] >= 0) & (q[..., 0] <= rw - 1) & (q[..., 1] >= 0) & (q[..., 1] <= rh - 1)
    return q, valid


def gt_field(grid_shape, h: Homography, stride: int = 4, ref_grid_shape=None):
    """``gt_correspondence`` for every cell of an ``(h, w)`` grid."""
    gh, gw = grid_shape
    ys, xs = np.mgrid[0:gh, 0:gw]
    return gt_correspondence(np.stack([xs, ys], axis=-1), h, stride,
                             ref_grid_shape=ref_grid_shape if ref_grid_shape is not None else grid_shape)
