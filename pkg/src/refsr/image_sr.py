"""x4 reference-based image super-resolution.

The LR input passes through a residual trunk. At three scales (LR, 2x, 4x)
reference features from a small pyramid are aggregated around the matched
positions and merged by residual texture transfer; depth-to-space doubles the
resolution between scales. A bicubic upsample of the input is added at the end.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import DynamicAggregation, scale_displacement
from .blocks import ResidualBlock, Upsample2x, count_parameters, depth_to_space, residual_stack, zero_module
from .checkpoint import Checkpoint, CheckpointError
from .contrastive import FixedFeatureMatcher, Matcher, TrainingDivergedError
from .descriptors import ConfigurationError, ContractViolation, Encoder
from .imageio import to_image, to_tensor
from .resize import upsample_tensor

log = logging.getLogger(__name__)

SCALE = 4


@dataclass
class SRModelConfig:
    channels: int = 64
    trunk_blocks: int = 16
    transfer_blocks: tuple = (16, 8, 4)
    ref_channels: tuple = (64, 64, 64)      # features at x1, x2, x4 (coarse to fine)
    dyn_agg: bool = True
    max_offset: float = 8.0
    patch_radius: int = 1

    def __post_init__(self):
        self.transfer_blocks = tuple(self.transfer_blocks)
        self.ref_channels = tuple(self.ref_channels)
        if len(self.transfer_blocks) != 3 or len(self.ref_channels) != 3:
            raise ConfigurationError("need three transfer scales")

    @classmethod
    def from_dict(cls, d: dict) -> "SRModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SRTrainConfig:
    lambda_rec: float = 1.0
    lambda_per: float = 1e-4
    lambda_adv: float = 1e-6
    learning_rate: float = 1e-4
    rec_only_iters: int = 10000
    gp_weight: float = 10.0
    iterations: int = 20000
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")

    @classmethod
    def rec_only(cls, **kw) -> "SRTrainConfig":
        """The reconstruction-only variant."""
        return cls(lambda_per=0.0, lambda_adv=0.0, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SRTrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown SR training keys: {sorted(unknown)}")
        return cls(**d)


class RefPyramid(nn.Module):
    """Reference features at full, half and quarter resolution of the reference image."""

    def __init__(self, channels=(64, 64, 64)):
        super().__init__()
        c1, c2, c4 = channels                    # x1 (quarter res) ... x4 (full res)
        self.s4 = nn.Sequential(nn.Conv2d(3, c4, 3, padding=1), nn.LeakyReLU(0.1),
                                nn.Conv2d(c4, c4, 3, padding=1), nn.LeakyReLU(0.1))
        self.s2 = nn.Sequential(nn.Conv2d(c4, c2, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
                                nn.Conv2d(c2, c2, 3, padding=1), nn.LeakyReLU(0.1))
        self.s1 = nn.Sequential(nn.Conv2d(c2, c1, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
                                nn.Conv2d(c1, c1, 3, padding=1), nn.LeakyReLU(0.1))

    def forward(self, ref):
        r4 = self.s4(ref - 0.5)
        r2 = self.s2(r4)
        r1 = self.s1(r2)
        return r1, r2, r4


class TextureTransfer(nn.Module):
    """``F + Res(F || R)``; the last layer starts at zero so the block starts as the identity."""

    def __init__(self, feat_channels: int, ref_channels: int, n_blocks: int):
        super().__init__()
        self.feat_channels = feat_channels
        self.ref_channels = ref_channels
        self.fuse = nn.Conv2d(feat_channels + ref_channels, feat_channels, 3, padding=1)
        self.body = residual_stack(feat_channels, n_blocks)
        self.out = zero_module(nn.Conv2d(feat_channels, feat_channels, 3, padding=1))

    def forward(self, feat: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if feat.shape[0] != ref.shape[0] or feat.shape[-2:] != ref.shape[-2:]:
            raise ContractViolation(f"feature {tuple(feat.shape)} and reference {tuple(ref.shape)} are not aligned")
        x = torch.cat([feat, ref], dim=1)
        return feat + self.out(self.body(F.leaky_relu(self.fuse(x), 0.1)))


def texture_transfer(block: TextureTransfer, feat: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return block(feat, ref)


def correspondence_displacement(matcher, lr: torch.Tensor, ref: torch.Tensor, patch_radius: int = 1) -> torch.Tensor:
    """``(B, h, w, 2)`` displacement ``p' - p`` on the LR lattice, in reference-grid cells."""
    out = []
    for i in range(lr.shape[0]):
        field = matcher.correspond(lr[i:i + 1], ref[i:i + 1], patch_radius=patch_radius)
        out.append(torch.from_numpy(field.displacement()).to(lr.dtype))
    p0 = torch.stack(out)
    h, w = lr.shape[-2:]
    if p0.shape[1:3] != (h, w):
        raise ContractViolation(f"matcher lattice {tuple(p0.shape[1:3])} is not the LR lattice {(h, w)}")
    return p0


class RefImageSR(nn.Module):
    def __init__(self, cfg: SRModelConfig = SRModelConfig(), matcher=None):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        r1, r2, r4 = cfg.ref_channels
        self.matcher = matcher.frozen() if matcher is not None else None
        self.head = nn.Conv2d(3, c, 3, padding=1)
        self.trunk = residual_stack(c, cfg.trunk_blocks)
        self.ref_pyramid = RefPyramid(cfg.ref_channels)
        self.agg = nn.ModuleList([DynamicAggregation(c, rc, rc, max_offset=cfg.max_offset) for rc in (r1, r2, r4)])
        self.transfer = nn.ModuleList([TextureTransfer(c, rc, n)
                                       for rc, n in zip((r1, r2, r4), cfg.transfer_blocks)])
        self.up = nn.ModuleList([Upsample2x(c), Upsample2x(c)])
        self.tail = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(0.1), nn.Conv2d(c, 3, 3, padding=1))
        if not cfg.dyn_agg:
            for a in self.agg:
                a.offsets.requires_grad_(False)

    def _aggregate(self, level: int, feat, ref_feat, p0):
        agg = self.agg[level]
        if self.cfg.dyn_agg:
            return agg(feat, ref_feat, p0)
        # fixed 3x3 window around the match: zero offsets, unit modulation
        from .aggregation import OffsetField, aggregate
        b, _, h, w = feat.shape
        k = agg.weight.shape[-1]
        off = OffsetField(torch.zeros(b, h, w, k, 2, dtype=feat.dtype), torch.ones(b, h, w, k, dtype=feat.dtype))
        return aggregate(ref_feat, p0, off, agg.weight, agg.kernel_size)

    def displacement(self, lr: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if self.matcher is None:
            raise ConfigurationError("no correspondence network weights loaded; pass a matcher checkpoint")
        return correspondence_displacement(self.matcher, lr, ref, self.cfg.patch_radius)

    def forward(self, lr: torch.Tensor, ref: torch.Tensor | None = None, p0: torch.Tensor | None = None):
        """``lr``: ``(B, 3, h, w)``; ``ref``: ``(B, 3, H, W)`` or ``None`` for the no-reference path."""
        feat = self.trunk(self.head(lr - 0.5))
        if ref is not None:
            if p0 is None:
                p0 = self.displacement(lr, ref)
            refs = self.ref_pyramid(ref)
        for level in range(3):
            if level:
                feat = self.up[level - 1](feat)
            if ref is not None:
                d = scale_displacement(p0, 2 ** level)
                r = self._aggregate(level, feat, refs[level], d)
                feat = self.transfer[level](feat, r)
        return self.tail(feat) + upsample_tensor(lr, SCALE)

    # -- persistence -------------------------------------------------------

    def to_checkpoint(self, extra_meta: dict | None = None) -> Checkpoint:
        tensors = {f"sr.{k}": v for k, v in self.state_dict().items() if not k.startswith("matcher.")}
        meta = {"model": _jsonable(asdict(self.cfg))}
        if isinstance(self.matcher, Matcher):
            mck = self.matcher.to_checkpoint()
            tensors.update({f"matcher.{k}": v for k, v in mck.tensors.items()})
            meta["matcher"] = mck.meta
        elif isinstance(self.matcher, FixedFeatureMatcher):
            meta["matcher"] = {"kind": "fixed"}
        meta.update(extra_meta or {})
        return Checkpoint("ref-image-sr-v1", tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RefImageSR":
        if ckpt.architecture_id != "ref-image-sr-v1":
            raise CheckpointError(f"not an image SR checkpoint: {ckpt.architecture_id}")
        matcher = _matcher_from(ckpt)
        model = cls(SRModelConfig.from_dict(ckpt.meta["model"]), matcher)
        state = ckpt.subset("sr.")
        model.load_state_dict(state, strict=False)
        missing = set(k for k in model.state_dict() if not k.startswith("matcher.")) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint is missing {sorted(missing)[:3]}...")
        model.eval()
        return model

    def save(self, path, **meta):
        self.to_checkpoint(meta).save(path)

    @classmethod
    def load(cls, path) -> "RefImageSR":
        return cls.from_checkpoint(Checkpoint.load(path))


def _matcher_from(ckpt: Checkpoint):
    meta = ckpt.meta.get("matcher")
    if meta is None:
        return None
    if meta.get("kind") == "fixed":
        return FixedFeatureMatcher()
    sub = Checkpoint("matcher-v1", ckpt.subset("matcher."), meta)
    return Matcher.from_checkpoint(sub).frozen()


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@torch.no_grad()
def restore(lr: np.ndarray, ref: np.ndarray, model: RefImageSR) -> np.ndarray:
    """SR image ``4x`` the LR size, clamped to ``[0, 1]``."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(to_tensor(lr, dtype), to_tensor(ref, dtype))
    return np.clip(to_image(out), 0.0, 1.0)


# ---------------------------------------------------------------------------
# losses


def rec_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    if sr.shape != hr.shape:
        raise ContractViolation(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    return (sr - hr).abs().mean()


def perceptual_loss(sr: torch.Tensor, hr: torch.Tensor, feature_extractor) -> torch.Tensor:
    """Sum over channels of the Frobenius norm of the feature difference, over the feature volume."""
    if feature_extractor is None:
        raise ConfigurationError("perceptual loss needs a feature extractor")
    if sr.shape != hr.shape:
        raise ContractViolation(f"shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    fs, fh = feature_extractor(sr), feature_extractor(hr)
    _, c, h, w = fs.shape
    per_channel = (fh - fs).flatten(2).norm(dim=2)           # (B, C)
    return (per_channel.sum(dim=1) / (c * h * w)).mean()


class EncoderFeatures(nn.Module):
    """Frozen encoder trunk used as the default perceptual feature extractor."""

    def __init__(self, encoder: Encoder):
        super().__init__()
        self.body = encoder.body
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.body(x - 0.5)


class Discriminator(nn.Module):
    """Strided convolutions, global average pool, linear score."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 2 * c, 4, stride=2, padding=1), nn.LeakyReLU(0.2))
        self.score = nn.Linear(2 * c, 1)

    def forward(self, x):
        return self.score(self.features(x).mean(dim=(2, 3)))[:, 0]


def adversarial_losses(sr: torch.Tensor, hr: torch.Tensor, discriminator, gp_weight: float = 10.0,
                       generator: torch.Generator | None = None):
    """Returns ``(generator_loss, discriminator_loss)`` with a gradient penalty on random blends."""
    g_loss = -discriminator(sr).mean()
    sr_d = sr.detach()
    eps = torch.rand((sr.shape[0],) + (1,) * (sr.dim() - 1), generator=generator, dtype=sr.dtype)
    blend = (eps * sr_d + (1 - eps) * hr).requires_grad_(True)
    score = discriminator(blend)
    grad, = torch.autograd.grad(score.sum(), blend, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(blend)
    penalty = ((grad.flatten(1).norm(dim=1) - 1.0) ** 2).mean()
    d_loss = discriminator(sr_d).mean() - discriminator(hr).mean() + gp_weight * penalty
    return g_loss, d_loss


# ---------------------------------------------------------------------------
# training


@dataclass
class SRSample:
    lr: np.ndarray
    ref: np.ndarray
    hr: np.ndarray


def _stack(samples, attr, dtype):
    return torch.cat([to_tensor(getattr(s, attr), dtype) for s in samples])


def train_sr(samples, matcher, cfg: SRTrainConfig, model_cfg: SRModelConfig = SRModelConfig(),
             feature_extractor=None, callback=None):
    """Train the restoration network with the correspondence network frozen.

    Iterations before ``rec_only_iters`` use the reconstruction loss alone and
    never touch the discriminator. Returns ``(model, discriminator, history)``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set")
    if matcher is None:
        raise ConfigurationError("SR training needs the stage-1 correspondence network")
    torch.manual_seed(cfg.seed)
    model = RefImageSR(model_cfg, matcher)
    disc = Discriminator()
    use_per = cfg.lambda_per > 0
    use_adv = cfg.lambda_adv > 0
    if use_per and feature_extractor is None:
        if isinstance(matcher, Matcher):
            feature_extractor = EncoderFeatures(matcher.ref_encoder)
        else:
            raise ConfigurationError("perceptual loss needs a feature extractor")
    params = [p for n, p in model.named_parameters() if p.requires_grad and not n.startswith("matcher.")]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999))
    d_opt = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5E]))

    # the matcher is frozen, so correspondences are computed once per sample
    with torch.no_grad():
        p0_cache = [model.displacement(to_tensor(s.lr), to_tensor(s.ref)) for s in samples]

    history = []
    model.train()
    for it in range(cfg.iterations):
        idx = rng.choice(len(samples), size=min(cfg.batch_size, len(samples)), replace=False)
        batch = [samples[i] for i in idx]
        lr = _stack(batch, "lr", torch.float32)
        ref = _stack(batch, "ref", torch.float32)
        hr = _stack(batch, "hr", torch.float32)
        p0 = torch.cat([p0_cache[i] for i in idx])
        sr = model(lr, ref, p0)
        l_rec = rec_loss(sr, hr)
        loss = cfg.lambda_rec * l_rec
        adv_phase = it >= cfg.rec_only_iters
        l_per = torch.zeros(())
        l_g = torch.zeros(())
        l_d = torch.zeros(())
        if adv_phase and use_per:
            l_per = perceptual_loss(sr, hr, feature_extractor)
            loss = loss + cfg.lambda_per * l_per
        if adv_phase and use_adv:
            for p in disc.parameters():
                p.requires_grad_(False)
            l_g = -disc(sr).mean()
            loss = loss + cfg.lambda_adv * l_g
            for p in disc.parameters():
                p.requires_grad_(True)
        if not math.isfinite(float(loss.detach())):
            raise TrainingDivergedError(f"non-finite SR loss at iteration {it}: rec={float(l_rec.detach()):.6g}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if adv_phase and use_adv:
            d_opt.zero_grad()
            _, l_d = adversarial_losses(sr.detach(), hr, disc, cfg.gp_weight, gen)
            l_d.backward()
            d_opt.step()
        rec = {"iter": it, "loss": float(loss.detach()), "rec": float(l_rec.detach()),
               "per": float(l_per.detach()), "adv_g": float(l_g.detach()), "adv_d": float(l_d.detach())}
        history.append(rec)
        if callback is not None:
            callback(rec, model, disc)
        if it % 100 == 0:
            log.info("sr iter %d loss %.5f rec %.5f", it, rec["loss"], rec["rec"])
    model.eval()
    return model, disc, history


def parameter_count(model: nn.Module) -> int:
    """Trainable parameters, excluding a frozen correspondence network."""
    return count_parameters(model)
