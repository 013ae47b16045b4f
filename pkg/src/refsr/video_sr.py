"""x4 reference-based video super-resolution with bidirectional recurrence.

Each LR frame is encoded, hidden states travel forward and backward through
the clip after flow warping, and a reference image contributes aggregated
features at the output resolution. The three streams are gated by attention
masks and fused with the upsampled frame feature.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import DynamicAggregation, scale_displacement
from .blocks import Upsample2x, residual_stack, zero_module
from .checkpoint import Checkpoint, CheckpointError
from .contrastive import FixedFeatureMatcher, Matcher, TrainingDivergedError
from .descriptors import ConfigurationError, ContractViolation
from .image_sr import _jsonable, _matcher_from, correspondence_displacement
from .imageio import to_image, to_tensor
from .resize import upsample_tensor

log = logging.getLogger(__name__)

SCALE = 4
CHARBONNIER_EPS = 1e-8


# ---------------------------------------------------------------------------
# warping


def flow_warp(feat: torch.Tensor, flow: torch.Tensor, border: bool = False) -> torch.Tensor:
    """Backward warp: ``out(x, y) = feat(x + dx, y + dy)`` with bilinear reads.

    ``feat`` is ``(B, C, H, W)``, ``flow`` ``(B, H, W, 2)`` in pixels. Taps that
    fall outside the map read zero, or the nearest edge value when ``border``.
    Integer flows are exact gathers.
    """
    b, c, h, w = feat.shape
    if flow.shape != (b, h, w, 2):
        raise ContractViolation(f"flow {tuple(flow.shape)} does not match features {(b, h, w)}")
    ys, xs = torch.meshgrid(torch.arange(h, dtype=flow.dtype), torch.arange(w, dtype=flow.dtype), indexing="ij")
    px = xs + flow[..., 0]
    py = ys + flow[..., 1]
    if border:
        px = px.clamp(0, w - 1)
        py = py.clamp(0, h - 1)
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    x0 = x0.long()
    y0 = y0.long()
    flat = feat.reshape(b, c, h * w)

    def tap(xi, yi):
        inside = ((xi >= 0) & (xi < w) & (yi >= 0) & (yi < h))
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, h * w).expand(b, c, h * w)
        v = torch.gather(flat, 2, idx).reshape(b, c, h, w)
        return torch.where(inside[:, None], v, torch.zeros((), dtype=feat.dtype))

    top = tap(x0, y0) * (1 - fx) + tap(x0 + 1, y0) * fx
    bottom = tap(x0, y0 + 1) * (1 - fx) + tap(x0 + 1, y0 + 1) * fx
    return top * (1 - fy) + bottom * fy


# ---------------------------------------------------------------------------
# flow estimation


def _gray(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(1, keepdim=True) if x.shape[1] == 3 else x.mean(1, keepdim=True)


def _blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    r = max(1, int(math.ceil(2 * sigma)))
    t = torch.arange(-r, r + 1, dtype=x.dtype)
    g = torch.exp(-t ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    x = F.conv2d(F.pad(x, (r, r, 0, 0), mode="replicate"), g.view(1, 1, 1, -1))
    return F.conv2d(F.pad(x, (0, 0, r, r), mode="replicate"), g.view(1, 1, -1, 1))


def _gradients(x: torch.Tensor):
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
    return gx, gy


def lucas_kanade(a: torch.Tensor, b: torch.Tensor, levels: int = 3, iterations: int = 5,
                 window_sigma: float = 2.0, damping: float = 1e-3) -> torch.Tensor:
    """Coarse-to-fine Lucas-Kanade flow ``(B, H, W, 2)`` with ``b(x + flow) ~= a(x)``."""
    ga, gb = _gray(a), _gray(b)
    pyr = [(ga, gb)]
    for _ in range(levels - 1):
        la, lb = pyr[-1]
        if min(la.shape[-2:]) < 32:     # coarser levels alias on fine texture
            break
        pyr.append((F.avg_pool2d(_blur(la, 1.0), 2), F.avg_pool2d(_blur(lb, 1.0), 2)))
    flow = None
    for la, lb in reversed(pyr):
        bsz, _, h, w = la.shape
        if flow is None:
            flow = torch.zeros(bsz, h, w, 2, dtype=la.dtype)
        else:
            flow = F.interpolate(flow.permute(0, 3, 1, 2), size=(h, w), mode="bilinear",
                                 align_corners=False).permute(0, 2, 3, 1) * 2.0
        for _ in range(iterations):
            bw = flow_warp(lb, flow, border=True)
            gx, gy = _gradients(bw)
            gax, gay = _gradients(la)
            gx, gy = (gx + gax) / 2, (gy + gay) / 2
            it = bw - la
            sxx = _blur(gx * gx, window_sigma) + damping
            syy = _blur(gy * gy, window_sigma) + damping
            sxy = _blur(gx * gy, window_sigma)
            bx = -_blur(gx * it, window_sigma)
            by = -_blur(gy * it, window_sigma)
            det = sxx * syy - sxy * sxy
            du = (syy * bx - sxy * by) / det
            dv = (sxx * by - sxy * bx) / det
            step = torch.cat([du, dv], 1).permute(0, 2, 3, 1).clamp(-1.0, 1.0)
            flow = flow + step
    return flow


class FlowEstimator(nn.Module):
    """Lucas-Kanade initialisation plus a learned residual (zero at initialisation)."""

    def __init__(self, hidden: int = 16, levels: int = 3, iterations: int = 5):
        super().__init__()
        self.levels = levels
        self.iterations = iterations
        self.refine = nn.Sequential(nn.Conv2d(8, hidden, 3, padding=1), nn.LeakyReLU(0.1),
                                    zero_module(nn.Conv2d(hidden, 2, 3, padding=1)))

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ContractViolation(f"frames differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        with torch.no_grad():
            base = lucas_kanade(a, b, self.levels, self.iterations)
        x = torch.cat([a, flow_warp(b, base), base.permute(0, 3, 1, 2)], 1)
        return base + self.refine(x).permute(0, 2, 3, 1)


def estimate_flow(a, b, estimator: FlowEstimator | None = None) -> np.ndarray:
    """``(H, W, 2)`` displacement ``(dx, dy)`` such that warping ``b`` by it approximates ``a``."""
    if estimator is None:
        raise ConfigurationError("no flow estimator weights; pass a FlowEstimator")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ContractViolation(f"frames differ in shape: {a.shape} vs {b.shape}")
    with torch.no_grad():
        flow = estimator(to_tensor(a, torch.float64).float(), to_tensor(b, torch.float64).float())
    return flow[0].numpy()


# ---------------------------------------------------------------------------
# network


@dataclass
class VSRConfig:
    channels: int = 32
    extract_blocks: int = 2
    prop_blocks: int = 4
    fusion_blocks: int = 2
    attention: bool = True
    ref_align: str = "match"       # "match" (correspondence + aggregation) or "flow"
    max_offset: float = 8.0
    patch_radius: int = 1
    flow_hidden: int = 16

    def __post_init__(self):
        if self.ref_align not in ("match", "flow"):
            raise ConfigurationError("ref_align must be 'match' or 'flow'")

    @classmethod
    def from_dict(cls, d: dict) -> "VSRConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class AttentionFuse(nn.Module):
    """``mask(F || h) * h`` with a two-layer head and a sigmoid."""

    def __init__(self, feat_channels: int, branch_channels: int, hidden: int = 16, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.conv1 = nn.Conv2d(feat_channels + branch_channels, hidden, 3, padding=1)
        self.conv2 = zero_module(nn.Conv2d(hidden, branch_channels, 3, padding=1))

    def mask(self, feat: torch.Tensor, branch: torch.Tensor) -> torch.Tensor:
        if feat.shape[0] != branch.shape[0] or feat.shape[-2:] != branch.shape[-2:]:
            raise ContractViolation(f"feature {tuple(feat.shape)} and branch {tuple(branch.shape)} are not aligned")
        if not self.enabled:
            return torch.ones_like(branch)
        return torch.sigmoid(self.conv2(F.leaky_relu(self.conv1(torch.cat([feat, branch], 1)), 0.1)))

    def forward(self, feat: torch.Tensor, branch: torch.Tensor) -> torch.Tensor:
        return self.mask(feat, branch) * branch


def attention_fuse(block: AttentionFuse, feat, branch):
    return block(feat, branch)


class Upsample4x(nn.Sequential):
    def __init__(self, c):
        super().__init__(Upsample2x(c), Upsample2x(c))


class PropagationCell(nn.Module):
    """``h_i = Res(F_i || warp(h_{i-1}))``."""

    def __init__(self, c: int, n_blocks: int):
        super().__init__()
        self.fuse = nn.Conv2d(2 * c, c, 3, padding=1)
        self.body = residual_stack(c, n_blocks)

    def forward(self, feat, warped_hidden):
        return self.body(F.leaky_relu(self.fuse(torch.cat([feat, warped_hidden], 1)), 0.1))


class RefVideoSR(nn.Module):
    def __init__(self, cfg: VSRConfig = VSRConfig(), matcher=None):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.matcher = matcher.frozen() if matcher is not None else None
        self.flow = FlowEstimator(cfg.flow_hidden)
        self.extract = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.LeakyReLU(0.1),
                                     residual_stack(c, cfg.extract_blocks))
        self.forward_cell = PropagationCell(c, cfg.prop_blocks)
        self.backward_cell = PropagationCell(c, cfg.prop_blocks)
        self.up_feat = Upsample4x(c)
        self.up_forward = Upsample4x(c)
        self.up_backward = Upsample4x(c)
        self.ref_feat = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.LeakyReLU(0.1),
                                      nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(0.1))
        self.ref_agg = DynamicAggregation(c, c, c, max_offset=cfg.max_offset)
        self.att_forward = AttentionFuse(c, c, enabled=cfg.attention)
        self.att_backward = AttentionFuse(c, c, enabled=cfg.attention)
        self.att_ref = AttentionFuse(c, c, enabled=cfg.attention)
        self.fusion = nn.Sequential(nn.Conv2d(4 * c, c, 3, padding=1), nn.LeakyReLU(0.1),
                                    residual_stack(c, cfg.fusion_blocks), nn.Conv2d(c, 3, 3, padding=1))

    # -- components ---------------------------------------------------------

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """``(T, 3, h, w)`` frames to ``(T, C, h, w)`` features."""
        return self.extract(frames - 0.5)

    def flows(self, frames: torch.Tensor):
        """Forward flows ``s_i`` (frame i from i-1) and backward flows (frame i from i+1)."""
        if frames.shape[0] < 2:
            return [], []
        cur, prev = frames[1:], frames[:-1]
        fwd = self.flow(cur, prev)           # warp frame i-1 onto i
        bwd = self.flow(prev, cur)           # warp frame i+1 onto i
        return list(fwd.unbind(0)), list(bwd.unbind(0))

    def propagate(self, feats: torch.Tensor, flows, direction: str = "forward") -> list[torch.Tensor]:
        """Recurrent hidden states, one per frame; the initial state is zero."""
        if direction not in ("forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")
        t = feats.shape[0]
        order = range(t) if direction == "forward" else range(t - 1, -1, -1)
        cell = self.forward_cell if direction == "forward" else self.backward_cell
        out = [None] * t
        hidden = torch.zeros_like(feats[:1])
        for n, i in enumerate(order):
            if n:
                flow = flows[i - 1] if direction == "forward" else flows[i]
                hidden = flow_warp(hidden, flow[None])
            hidden = cell(feats[i:i + 1], hidden)
            out[i] = hidden
        return out

    def reference_displacement(self, frames: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        if self.matcher is None:
            raise ConfigurationError("no correspondence network weights loaded; pass a matcher checkpoint")
        refs = ref.expand(frames.shape[0], -1, -1, -1)
        return correspondence_displacement(self.matcher, frames, refs, self.cfg.patch_radius)

    def reference_branch(self, frames: torch.Tensor, ref: torch.Tensor, feat_up: torch.Tensor,
                         p0: torch.Tensor | None = None) -> torch.Tensor:
        """Reference features aggregated on the output lattice, ``(T, C, 4h, 4w)``."""
        t = frames.shape[0]
        rf = self.ref_feat(ref - 0.5).expand(t, -1, -1, -1)
        if self.cfg.ref_align == "flow":
            up = upsample_tensor(frames, SCALE)
            refs = ref.expand(t, -1, -1, -1)
            if up.shape[-2:] != refs.shape[-2:]:
                raise ContractViolation("flow alignment needs a reference of the output size")
            with torch.no_grad():
                flow = lucas_kanade(up, refs)
            return flow_warp(rf, flow)
        if p0 is None:
            p0 = self.reference_displacement(frames, ref)
        return self.ref_agg(feat_up, rf, scale_displacement(p0, SCALE))

    def forward(self, frames: torch.Tensor, ref: torch.Tensor | None = None,
                p0: torch.Tensor | None = None) -> torch.Tensor:
        """``frames``: ``(T, 3, h, w)``; ``ref``: ``(1, 3, H, W)`` or ``None``. Returns ``(T, 3, 4h, 4w)``."""
        feats = self.features(frames)
        fwd_flows, bwd_flows = self.flows(frames)
        hf = torch.cat(self.propagate(feats, fwd_flows, "forward"))
        hb = torch.cat(self.propagate(feats, bwd_flows, "backward"))
        feat_up = self.up_feat(feats)
        branch_f = self.att_forward(feat_up, self.up_forward(hf))
        branch_b = self.att_backward(feat_up, self.up_backward(hb))
        if ref is None:
            branch_r = torch.zeros_like(feat_up)
        else:
            branch_r = self.att_ref(feat_up, self.reference_branch(frames, ref, feat_up, p0))
        fused = self.fusion(torch.cat([feat_up, branch_f, branch_b, branch_r], 1))
        return fused + F.interpolate(frames, scale_factor=SCALE, mode="bilinear", align_corners=False)

    def zero_reference_branch(self) -> "RefVideoSR":
        with torch.no_grad():
            self.ref_agg.weight.zero_()
        return self

    # -- persistence ----------------------------------------------------------

    def to_checkpoint(self, extra_meta: dict | None = None) -> Checkpoint:
        tensors = {f"vsr.{k}": v for k, v in self.state_dict().items() if not k.startswith("matcher.")}
        meta = {"model": _jsonable(asdict(self.cfg))}
        if isinstance(self.matcher, Matcher):
            mck = self.matcher.to_checkpoint()
            tensors.update({f"matcher.{k}": v for k, v in mck.tensors.items()})
            meta["matcher"] = mck.meta
        elif isinstance(self.matcher, FixedFeatureMatcher):
            meta["matcher"] = {"kind": "fixed"}
        meta.update(extra_meta or {})
        return Checkpoint("ref-video-sr-v1", tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "RefVideoSR":
        if ckpt.architecture_id != "ref-video-sr-v1":
            raise CheckpointError(f"not a video SR checkpoint: {ckpt.architecture_id}")
        model = cls(VSRConfig.from_dict(ckpt.meta["model"]), _matcher_from(ckpt))
        state = ckpt.subset("vsr.")
        missing = set(k for k in model.state_dict() if not k.startswith("matcher.")) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint is missing {sorted(missing)[:3]}...")
        model.load_state_dict(state, strict=False)
        model.eval()
        return model

    def save(self, path, **meta):
        self.to_checkpoint(meta).save(path)

    @classmethod
    def load(cls, path) -> "RefVideoSR":
        return cls.from_checkpoint(Checkpoint.load(path))


def _frames_tensor(frames) -> torch.Tensor:
    frames = [np.asarray(f) for f in frames]
    if not frames:
        raise ValueError("empty clip")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ContractViolation("clip frames differ in shape")
    return torch.cat([to_tensor(f) for f in frames])


@torch.no_grad()
def restore_clip(frames, ref, model: RefVideoSR) -> list[np.ndarray]:
    """Super-resolve every frame; ``ref=None`` runs without the reference branch."""
    model.eval()
    x = _frames_tensor(frames)
    r = None if ref is None else to_tensor(np.asarray(ref))
    out = model(x, r)
    return [np.clip(to_image(out[i:i + 1]), 0.0, 1.0) for i in range(out.shape[0])]


def charbonnier_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = CHARBONNIER_EPS) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return torch.sqrt((pred - gt) ** 2 + eps * eps).mean()


# ---------------------------------------------------------------------------
# training


@dataclass
class VSRTrainConfig:
    learning_rate: float = 2e-4
    flow_learning_rate: float = 2.5e-5
    flow_frozen_iters: int = 5000
    iterations: int = 300000
    patch_size: int = 16           # LR patch side; 0 trains on whole frames
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "VSRTrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown video training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VideoSample:
    lr: list
    hr: list
    ref: np.ndarray | None = None


def _random_patch(sample, size: int, rng, crop_ref: bool = False):
    """Crop LR/HR frames; the displacement is shifted so it still points into the full reference.

    With ``crop_ref`` the reference is cut to the same HR window, as flow
    alignment compares it pixel for pixel with the upsampled frame.
    """
    lr, hr, ref, p0 = sample
    h, w = lr.shape[-2:]
    if not size or (size >= h and size >= w):
        return sample
    size = min(size, h, w)
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    lr_c = lr[..., y:y + size, x:x + size]
    hr_c = hr[..., y * SCALE:(y + size) * SCALE, x * SCALE:(x + size) * SCALE]
    if p0 is not None:
        p0 = p0[:, y:y + size, x:x + size] + torch.tensor([x, y], dtype=p0.dtype)
    if crop_ref and ref is not None:
        ref = ref[..., y * SCALE:(y + size) * SCALE, x * SCALE:(x + size) * SCALE]
    return lr_c, hr_c, ref, p0


def train_vsr(clips, matcher, cfg: VSRTrainConfig, model_cfg: VSRConfig = VSRConfig(), callback=None):
    """One clip per iteration in a seeded order, cropped to ``patch_size`` LR pixels. Returns ``(model, history)``."""
    clips = list(clips)
    if not clips:
        raise ValueError("no training clips")
    if matcher is None and model_cfg.ref_align == "match" and any(c.ref is not None for c in clips):
        raise ConfigurationError("video training with references needs the stage-1 correspondence network")
    torch.manual_seed(cfg.seed)
    model = RefVideoSR(model_cfg, matcher)
    flow_params = list(model.flow.parameters())
    flow_ids = {id(p) for p in flow_params}
    main = [p for n, p in model.named_parameters()
            if id(p) not in flow_ids and not n.startswith("matcher.") and p.requires_grad]
    opt = torch.optim.Adam([{"params": main, "lr": cfg.learning_rate},
                            {"params": flow_params, "lr": cfg.flow_learning_rate}], betas=(0.9, 0.99))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x71D]))
    tensors = []
    for c in clips:
        lr = _frames_tensor(c.lr)
        ref = None if c.ref is None else to_tensor(np.asarray(c.ref))
        p0 = None
        if ref is not None and model_cfg.ref_align == "match":
            with torch.no_grad():
                p0 = model.reference_displacement(lr, ref)
        tensors.append((lr, _frames_tensor(c.hr), ref, p0))
    history = []
    model.train()
    for it in range(cfg.iterations):
        frozen = it < cfg.flow_frozen_iters
        for p in flow_params:
            p.requires_grad_(not frozen)
        lr, hr, ref, p0 = _random_patch(tensors[int(rng.integers(len(tensors)))], cfg.patch_size, rng,
                                       crop_ref=model_cfg.ref_align == "flow")
        loss = charbonnier_loss(model(lr, ref, p0), hr)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite video loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rec = {"iter": it, "loss": value, "flow_frozen": frozen}
        history.append(rec)
        if callback is not None:
            callback(rec, model)
        if it % 100 == 0:
            log.info("vsr iter %d loss %.5f", it, value)
    model.eval()
    return model, history
