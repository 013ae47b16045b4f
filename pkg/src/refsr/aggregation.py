"""Correspondence-anchored deformable aggregation of reference features.

For every output position ``p`` the aggregated feature is::

    y(p) = sum_k w_k . x(p + p0(p) + base_k + dp_k(p)) * dm_k(p)

where ``p0`` is the matched displacement ``p' - p``, ``base_k`` the taps of a
3x3 lattice (row-major, ``dy`` outer), ``dp_k`` learned offsets and ``dm_k``
learned modulation scalars in ``[0, 1]``. Fractional positions are read with
bilinear interpolation; neighbours outside the feature map contribute zero.
All coordinates are ``(x, y)`` in feature-map pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .descriptors import ContractViolation


def base_taps(kernel_size: int = 3, device=None, dtype=torch.float32) -> torch.Tensor:
    """``(K, 2)`` tap displacements ``(dx, dy)`` of a square kernel, row-major."""
    r = kernel_size // 2
    taps = [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return torch.tensor(taps, device=device, dtype=dtype)


def pixel_grid(b: int, h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """``(B, H, W, 2)`` tensor of ``(x, y)`` positions."""
    ys, xs = torch.meshgrid(torch.arange(h, device=device, dtype=dtype),
                            torch.arange(w, device=device, dtype=dtype), indexing="ij")
    return torch.stack([xs, ys], dim=-1)[None].expand(b, -1, -1, -1)


def bilinear_sample(feat: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Read ``feat`` at fractional positions.

    Args:
        feat: ``(B, C, H, W)`` or ``(C, H, W)``.
        coords: ``(B, *S, 2)`` (or ``(*S, 2)`` for unbatched ``feat``) positions ``(x, y)``.

    Returns:
        ``(B, C, *S)`` (or ``(C, *S)``) values; neighbours outside the map count as zero.
    """
    unbatched = feat.dim() == 3
    if unbatched:
        feat, coords = feat[None], coords[None]
    b, c, h, w = feat.shape
    spatial = coords.shape[1:-1]
    flat = coords.reshape(b, 1, -1, 2)
    # align_corners=True maps -1/+1 onto the centres of the border pixels
    gx = 2.0 * flat[..., 0] / max(w - 1, 1) - 1.0 if w > 1 else flat[..., 0] * 2.0
    gy = 2.0 * flat[..., 1] / max(h - 1, 1) - 1.0 if h > 1 else flat[..., 1] * 2.0
    out = F.grid_sample(feat, torch.stack([gx, gy], dim=-1).to(feat.dtype), mode="bilinear",
                        padding_mode="zeros", align_corners=True)
    out = out.reshape(b, c, *spatial)
    return out[0] if unbatched else out


@dataclass
class OffsetField:
    """``offsets``: ``(B, H, W, K, 2)`` in feature pixels; ``modulations``: ``(B, H, W, K)`` in ``[0, 1]``."""
    offsets: torch.Tensor
    modulations: torch.Tensor

    @property
    def kernel_taps(self) -> int:
        return self.modulations.shape[-1]


def aggregate(ref_feat: torch.Tensor, p0: torch.Tensor, off: OffsetField, weight: torch.Tensor,
              kernel_size: int = 3) -> torch.Tensor:
    """Modulated deformable sampling anchored at ``p + p0``.

    Args:
        ref_feat: ``(B, C_in, Hr, Wr)`` reference features.
        p0: ``(B, H, W, 2)`` displacement to the matched position, in ``ref_feat`` pixels.
        off: learned offsets and modulations on the ``(H, W)`` output lattice.
        weight: ``(C_out, C_in, K)`` kernel.

    Returns:
        ``(B, C_out, H, W)``.
    """
    b, h, w, _ = p0.shape
    k = weight.shape[-1]
    if off.offsets.shape != (b, h, w, k, 2) or off.modulations.shape != (b, h, w, k):
        raise ContractViolation(
            f"offset field {tuple(off.offsets.shape)}/{tuple(off.modulations.shape)} "
            f"does not match lattice {(b, h, w)} with K={k}")
    if weight.shape[1] != ref_feat.shape[1]:
        raise ContractViolation("kernel input channels differ from reference feature channels")
    taps = base_taps(kernel_size, ref_feat.device, p0.dtype)
    if taps.shape[0] != k:
        raise ContractViolation(f"kernel has {k} taps, a {kernel_size}x{kernel_size} lattice has {taps.shape[0]}")
    anchor = pixel_grid(b, h, w, p0.device, p0.dtype) + p0
    coords = anchor[:, :, :, None, :] + taps + off.offsets
    sampled = bilinear_sample(ref_feat, coords)              # (B, C_in, H, W, K)
    sampled = sampled * off.modulations[:, None]
    return torch.einsum("ock,bchwk->bohw", weight, sampled)


def scale_displacement(p0: torch.Tensor, factor: int) -> torch.Tensor:
    """Carry a ``(B, H, W, 2)`` displacement field to a lattice ``factor`` times finer."""
    if factor == 1:
        return p0
    up = p0.repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2)
    return up * factor


class OffsetHead(nn.Module):
    """Predicts offsets and modulations from input features and pre-gathered reference features."""

    def __init__(self, in_channels: int, ref_channels: int, kernel_taps: int = 9, hidden: int = 32,
                 max_offset: float = 8.0):
        super().__init__()
        self.k = kernel_taps
        self.max_offset = max_offset
        self.conv1 = nn.Conv2d(in_channels + ref_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 3 * kernel_taps, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, input_feat: torch.Tensor, ref_gathered: torch.Tensor) -> OffsetField:
        if input_feat.shape[-2:] != ref_gathered.shape[-2:] or input_feat.shape[0] != ref_gathered.shape[0]:
            raise ContractViolation(
                f"input {tuple(input_feat.shape)} and gathered reference {tuple(ref_gathered.shape)} are not aligned")
        out = self.conv2(F.leaky_relu(self.conv1(torch.cat([input_feat, ref_gathered], 1)), 0.1))
        b, _, h, w = out.shape
        off = out[:, :2 * self.k].reshape(b, self.k, 2, h, w).permute(0, 3, 4, 1, 2)
        off = torch.clamp(off, -self.max_offset, self.max_offset)
        mod = torch.sigmoid(out[:, 2 * self.k:]).permute(0, 2, 3, 1)
        return OffsetField(off, mod)


class DynamicAggregation(nn.Module):
    """Offset head plus kernel; ``forward`` returns the aggregated reference feature."""

    def __init__(self, in_channels: int, ref_channels: int, out_channels: int | None = None,
                 kernel_size: int = 3, hidden: int = 32, max_offset: float = 8.0):
        super().__init__()
        out_channels = out_channels or ref_channels
        self.kernel_size = kernel_size
        k = kernel_size * kernel_size
        self.offsets = OffsetHead(in_channels, ref_channels, k, hidden, max_offset)
        self.weight = nn.Parameter(torch.empty(out_channels, ref_channels, k))
        nn.init.kaiming_uniform_(self.weight.view(out_channels, ref_channels, kernel_size, kernel_size), a=5 ** 0.5)

    def forward(self, input_feat: torch.Tensor, ref_feat: torch.Tensor, p0: torch.Tensor) -> torch.Tensor:
        b, _, h, w = input_feat.shape
        if p0.shape != (b, h, w, 2):
            raise ContractViolation(f"displacement field {tuple(p0.shape)} does not match features {(b, h, w)}")
        gathered = bilinear_sample(ref_feat, pixel_grid(b, h, w, p0.device, p0.dtype) + p0)
        off = self.offsets(input_feat, gathered)
        return aggregate(ref_feat, p0, off, self.weight, self.kernel_size)
