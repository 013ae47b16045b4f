"""Dense descriptor extraction and descriptor matching.

Coordinates on a descriptor grid are ``(x, y) = (column, row)``; cell
``(x, y)`` is centred on image pixel ``(stride * x, stride * y)``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, CheckpointError
from .imageio import to_tensor

DEFAULT_TEMPERATURE = 0.15


class ConfigurationError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


@dataclass
class DescriptorGrid:
    """``data`` is an ``(h, w, d)`` tensor; ``role`` is ``"LR"`` or ``"HR"``."""
    data: torch.Tensor
    stride: int = 4
    role: str = "HR"

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dim(self) -> int:
        return self.data.shape[-1]


@dataclass
class CorrespondenceField:
    """``targets[y, x]`` is the matched reference cell ``(x', y')``; ``scores`` the cosine similarity."""
    targets: np.ndarray
    scores: np.ndarray

    def displacement(self) -> np.ndarray:
        """Per-cell offset ``p' - p`` in grid units, shape ``(h, w, 2)``."""
        h, w = self.targets.shape[:2]
        ys, xs = np.mgrid[0:h, 0:w]
        return self.targets - np.stack([xs, ys], axis=-1)


@dataclass
class CorrelationVolume:
    data: torch.Tensor
    temperature: float = DEFAULT_TEMPERATURE


# ---------------------------------------------------------------------------
# encoder


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    channels: tuple = (64, 128, 256)
    descriptor_dim: int = 256
    normalize: bool = True

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def architecture_id(self) -> str:
        ch = ",".join(str(c) for c in self.channels)
        return (f"convstack-v1/in={self.in_channels}/ch={ch}/d={self.descriptor_dim}"
                f"/s={self.stride}/n={int(self.normalize)}")

    @classmethod
    def from_architecture_id(cls, arch: str) -> "EncoderConfig":
        parts = arch.split("/")
        if parts[0] != "convstack-v1":
            raise ConfigurationError(f"unknown encoder architecture {arch!r}")
        kv = dict(p.split("=", 1) for p in parts[1:])
        cfg = cls(int(kv["in"]), tuple(int(c) for c in kv["ch"].split(",")), int(kv["d"]),
                  bool(int(kv.get("n", "1"))))
        if "s" in kv and int(kv["s"]) != cfg.stride:
            raise ConfigurationError(f"stride in {arch!r} disagrees with the stage count")
        return cfg


class Encoder(nn.Module):
    """Stack of 3x3 convolution stages; every stage after the first halves resolution.

    With ``cfg.normalize`` the descriptors leave the encoder unit-normalized.
    Unnormalized outputs let the margin loss collapse every descriptor to one point.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        prev = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            layers += [nn.Conv2d(prev, c, 3, stride=1 if i == 0 else 2, padding=1),
                       nn.LeakyReLU(0.1, inplace=True),
                       nn.Conv2d(c, c, 3, padding=1),
                       nn.LeakyReLU(0.1, inplace=True)]
            prev = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, cfg.descriptor_dim, 1)
        # default bias init dominates the response and maps every cell to nearly one descriptor
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.bias)

    @property
    def stride(self) -> int:
        return self.cfg.stride

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, C, H, W)`` in [0, 1] to ``(B, d, ceil(H/s), ceil(W/s))``."""
        if x.shape[1] != self.cfg.in_channels:
            raise ConfigurationError(
                f"encoder expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        s = self.stride
        ph, pw = (-x.shape[2]) % s, (-x.shape[3]) % s
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        f = self.head(self.body(x - 0.5))
        return F.normalize(f, dim=1, eps=1e-12) if self.cfg.normalize else f


@dataclass
class EncoderWeights:
    """Immutable parameters of one encoder branch plus the metadata needed to rebuild it."""
    architecture_id: str
    state: dict
    role: str = "HR"
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> EncoderConfig:
        return EncoderConfig.from_architecture_id(self.architecture_id)

    @property
    def descriptor_dim(self) -> int:
        return self.config.descriptor_dim

    @property
    def stride(self) -> int:
        return self.config.stride

    @classmethod
    def from_module(cls, enc: Encoder, role: str = "HR", **meta) -> "EncoderWeights":
        state = {k: v.detach().clone() for k, v in enc.state_dict().items()}
        return cls(enc.cfg.architecture_id, state, role, dict(meta))

    def build(self) -> Encoder:
        enc = Encoder(self.config)
        enc.load_state_dict(self.state)
        enc.eval()
        for p in enc.parameters():
            p.requires_grad_(False)
        return enc

    def to_checkpoint(self) -> Checkpoint:
        cfg = self.config
        meta = dict(self.meta, role=self.role, descriptor_dim=cfg.descriptor_dim, stride=cfg.stride)
        return Checkpoint(self.architecture_id, dict(self.state), meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EncoderWeights":
        meta = dict(ckpt.meta)
        role = meta.pop("role", "HR")
        cfg = EncoderConfig.from_architecture_id(ckpt.architecture_id)
        if meta.pop("descriptor_dim", cfg.descriptor_dim) != cfg.descriptor_dim or \
                meta.pop("stride", cfg.stride) != cfg.stride:
            raise CheckpointError("shape metadata disagrees with architecture_id")
        return cls(ckpt.architecture_id, dict(ckpt.tensors), role, meta)

    def save(self, path: str | os.PathLike) -> None:
        self.to_checkpoint().save(path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EncoderWeights":
        return cls.from_checkpoint(Checkpoint.load(path))


def extract_descriptors(image, weights: EncoderWeights | Encoder, role: str | None = None) -> DescriptorGrid:
    """Run one encoder branch over an ``(H, W, C)`` image."""
    enc = weights.build() if isinstance(weights, EncoderWeights) else weights
    if role is None:
        role = weights.role if isinstance(weights, EncoderWeights) else "HR"
    x = image if isinstance(image, torch.Tensor) else to_tensor(image)
    if x.dim() == 3:
        x = x.permute(2, 0, 1)[None]
    with torch.no_grad():
        f = enc(x.to(next(enc.parameters()).dtype))
    return DescriptorGrid(f[0].permute(1, 2, 0).contiguous(), enc.stride, role)


# ---------------------------------------------------------------------------
# matching


def patchify(grid: DescriptorGrid, radius: int) -> DescriptorGrid:
    """Concatenate the ``(2r+1)^2`` neighbourhood of every cell, zero-padded at borders.

    Blocks are ordered row-major over offsets ``(dy, dx)`` from ``(-r, -r)`` to ``(r, r)``.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return grid
    return DescriptorGrid(patchify_tensor(grid.data, radius), grid.stride, grid.role)


def patchify_tensor(data: torch.Tensor, radius: int) -> torch.Tensor:
    h, w, _ = data.shape
    r = radius
    padded = F.pad(data, (0, 0, r, r, r, r))
    blocks = [padded[r + dy:r + dy + h, r + dx:r + dx + w]
              for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return torch.cat(blocks, dim=-1)


def l2_normalize(f: torch.Tensor) -> torch.Tensor:
    """Unit-normalize along the last axis; zero vectors stay zero."""
    norm = f.norm(dim=-1, keepdim=True)
    return torch.where(norm > 0, f / torch.where(norm > 0, norm, torch.ones_like(norm)), torch.zeros_like(f))


def cosine_similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``(..., N, d) x (..., M, d) -> (..., N, M)`` normalized dot products."""
    return l2_normalize(a) @ l2_normalize(b).transpose(-1, -2)


def _flat(grid: DescriptorGrid) -> torch.Tensor:
    return grid.data.reshape(-1, grid.data.shape[-1])


def match(lr: DescriptorGrid, ref: DescriptorGrid, chunk: int = 4096) -> CorrespondenceField:
    """Best reference cell for every input cell by cosine similarity.

    Ties go to the lowest row-major reference index.
    """
    if lr.dim != ref.dim:
        raise ContractViolation(f"descriptor dims differ: {lr.dim} vs {ref.dim}")
    if ref.data.shape[0] * ref.data.shape[1] == 0:
        raise ContractViolation("reference grid is empty")
    h, w = lr.data.shape[:2]
    rw = ref.data.shape[1]
    a = l2_normalize(_flat(lr).double())
    b = l2_normalize(_flat(ref).double())
    idx, scores = [], []
    for start in range(0, a.shape[0], chunk):
        s = a[start:start + chunk] @ b.T
        sc = s.max(dim=1).values
        # torch.max does not promise the first index on ties
        ix = (s == sc[:, None]).to(torch.int8).argmax(dim=1)
        idx.append(ix)
        scores.append(sc)
    ix = torch.cat(idx).numpy()
    targets = np.stack([ix % rw, ix // rw], axis=-1).reshape(h, w, 2)
    return CorrespondenceField(targets.astype(np.int64), torch.cat(scores).numpy().reshape(h, w))


def correlation_logits(a: torch.Tensor, b: torch.Tensor, temperature: float) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return cosine_similarity_matrix(a, b) / temperature


def correlation_volume(a: DescriptorGrid, b: DescriptorGrid,
                       temperature: float = DEFAULT_TEMPERATURE) -> CorrelationVolume:
    """Row-wise temperature softmax of cosine similarities, shape ``(N, M)``."""
    if temperature <= 0 or not math.isfinite(temperature):
        raise ValueError(f"temperature must be a positive number, got {temperature}")
    if a.dim != b.dim:
        raise ContractViolation(f"descriptor dims differ: {a.dim} vs {b.dim}")
    logits = correlation_logits(_flat(a), _flat(b), temperature)
    return CorrelationVolume(torch.softmax(logits, dim=-1), temperature)


def raw_patch_grid(image: torch.Tensor, stride: int = 4, radius: int = 1) -> DescriptorGrid:
    """Zero-mean raw-pixel ``(2r+1)^2`` patches sampled every ``stride`` pixels of a ``(1, C, H, W)`` image."""
    x = image[0].permute(1, 2, 0)
    sub = x[::stride, ::stride]
    grid = patchify_tensor(sub, 0) if radius == 0 else _pixel_patches(x, stride, radius)
    grid = grid - grid.mean(dim=-1, keepdim=True)
    return DescriptorGrid(grid, stride, "HR")


def _pixel_patches(x: torch.Tensor, stride: int, radius: int) -> torch.Tensor:
    h, w, _ = x.shape
    r = radius
    padded = F.pad(x, (0, 0, r, r, r, r), mode="constant")
    ys = torch.arange(0, h, stride)
    xs = torch.arange(0, w, stride)
    blocks = [padded[r + dy + ys][:, r + dx + xs] for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    return torch.cat(blocks, dim=-1)
