from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ChannelError(ValueError):
    pass


def depth_to_space(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """``(B, C*f*f, H, W) -> (B, C, f*H, f*W)``; channel ``c*f*f + i*f + j`` lands at ``(f*h + i, f*w + j)``."""
    b, c, h, w = x.shape
    if c % (factor * factor):
        raise ChannelError(f"{c} channels are not divisible by {factor * factor}")
    c_out = c // (factor * factor)
    x = x.reshape(b, c_out, factor, factor, h, w)
    return x.permute(0, 1, 4, 2, 5, 3).reshape(b, c_out, h * factor, w * factor)


def space_to_depth(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Inverse of :func:`depth_to_space`."""
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise ChannelError(f"spatial size {h}x{w} is not divisible by {factor}")
    x = x.reshape(b, c, h // factor, factor, w // factor, factor)
    return x.permute(0, 1, 3, 5, 2, 4).reshape(b, c * factor * factor, h // factor, w // factor)


class ResidualBlock(nn.Module):
    """conv-relu-conv with identity skip."""

    def __init__(self, channels: int, res_scale: float = 1.0):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.res_scale = res_scale
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_normal_(conv.weight, a=0, mode="fan_in")
            conv.weight.data.mul_(0.1)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        return x + self.res_scale * self.conv2(F.relu(self.conv1(x)))


def residual_stack(channels: int, n: int) -> nn.Sequential:
    return nn.Sequential(*[ResidualBlock(channels) for _ in range(n)])


class Upsample2x(nn.Module):
    """conv to 4x channels, depth-to-space, leaky ReLU."""

    def __init__(self, in_channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or in_channels
        self.conv = nn.Conv2d(in_channels, out_channels * 4, 3, padding=1)

    def forward(self, x):
        return F.leaky_relu(depth_to_space(self.conv(x), 2), 0.1)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
