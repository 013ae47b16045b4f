"""Dataset-level evaluation and reports.

Report schema (JSON, keys sorted)::

    {"aggregate": {"psnr": .., "ssim": .., "aee": .. (benchmarks only), "count": n},
     "groups": {"<group or similarity>": {...same keys...}},
     "per_image": [{"input": .., "psnr": .., "ssim": .., "aee": .., "group": .., "similarity": ..,
                    "frame": .. (video)}],
     "config": {...}, "fingerprint": "<sha256 of config>",
     "content_hash": "<sha256 of everything except timestamp/wall_clock>",
     "timestamp": "...", "wall_clock": seconds}

An infinite PSNR (identical images) is written as the string ``"inf"``.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import DatasetManifest, load_gt, read_clip
from .imageio import crop_to_multiple, read_png
from .metrics import MetricError, aee, psnr, ssim
from .resize import bicubic_downsample, bicubic_upsample

log = logging.getLogger(__name__)

VOLATILE_KEYS = ("timestamp", "wall_clock")


class EvalInputError(FileNotFoundError):
    """Missing or unusable evaluation inputs; ``problems`` lists each one."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("evaluation inputs are missing:\n  " + "\n  ".join(self.problems))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def _encode(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_encode(x) for x in v]
    if isinstance(v, np.generic):
        return _encode(v.item())
    return v


def canonical_json(obj) -> str:
    return json.dumps(_encode(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class EvalReport:
    per_image: list
    config: dict
    wall_clock: float = 0.0
    timestamp: str = ""
    plots: list = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    @staticmethod
    def _summary(rows) -> dict:
        out = {"count": len(rows)}
        for key in ("psnr", "ssim", "aee"):
            vals = [r[key] for r in rows if r.get(key) is not None]
            if vals:
                out[key] = float(np.mean(vals))
        return out

    @property
    def aggregate(self) -> dict:
        return self._summary(self.per_image)

    @property
    def groups(self) -> dict:
        keys = sorted({r.get("group") or r.get("similarity") or "all" for r in self.per_image})
        return {k: self._summary([r for r in self.per_image if (r.get("group") or r.get("similarity") or "all") == k])
                for k in keys}

    def body(self) -> dict:
        return {"aggregate": self.aggregate, "groups": self.groups, "per_image": self.per_image,
                "config": self.config, "fingerprint": self.fingerprint, "plots": self.plots}

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.body()).encode()).hexdigest()

    def to_json(self) -> str:
        d = self.body()
        d.update(content_hash=self.content_hash, timestamp=self.timestamp, wall_clock=self.wall_clock)
        return json.dumps(_encode(d), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_json(), encoding="utf-8")
        os.replace(tmp, path)


def strip_volatile(report_text: str) -> dict:
    d = json.loads(report_text)
    for k in VOLATILE_KEYS:
        d.pop(k, None)
    return d


# ---------------------------------------------------------------------------


def _load_model(model):
    """``"bicubic"``, a checkpoint path, or an already built model."""
    if isinstance(model, str) and model == "bicubic":
        return "bicubic", {"model": "bicubic"}
    if isinstance(model, (str, os.PathLike)):
        path = Path(model)
        if not path.is_file():
            raise EvalInputError([f"weights: {path}"])
        ckpt = Checkpoint.load(path)
        if ckpt.architecture_id == "ref-image-sr-v1":
            from .image_sr import RefImageSR
            net = RefImageSR.from_checkpoint(ckpt)
        elif ckpt.architecture_id == "ref-video-sr-v1":
            from .video_sr import RefVideoSR
            net = RefVideoSR.from_checkpoint(ckpt)
        else:
            raise EvalInputError([f"weights: {path} holds {ckpt.architecture_id!r}, not an SR model"])
        return net, {"model": ckpt.architecture_id, "weights_sha256": sha256_file(path)}
    return model, {"model": type(model).__name__}


def _metrics(sr, hr, channel):
    return {"psnr": psnr(sr, hr, channel), "ssim": ssim(sr, hr, channel)}


def _image_rows(net, manifest: DatasetManifest, channel: str, scale: int):
    from .image_sr import restore
    from .imageio import to_tensor
    rows = []
    for rec in manifest:
        hr = crop_to_multiple(read_png(manifest.resolve(rec.input_path)), scale * 4)
        lr = bicubic_downsample(hr, scale)
        ref = read_png(manifest.resolve(rec.ref_paths[0])) if rec.ref_paths else None
        if net == "bicubic":
            sr = np.clip(bicubic_upsample(lr, scale), 0.0, 1.0)
        else:
            sr = restore(lr, ref, net) if ref is not None else _no_ref(net, lr)
        row = {"input": rec.input_path, "similarity": rec.similarity, **_metrics(sr, hr, channel)}
        if rec.extra.get("group"):
            row["group"] = rec.extra["group"]
        gt_path = rec.extra.get("gt_path")
        matcher = getattr(net, "matcher", None)
        if gt_path and matcher is not None and ref is not None:
            gt, valid = load_gt(manifest.resolve(gt_path))
            field_ = matcher.correspond(to_tensor(lr), to_tensor(ref))
            if field_.targets.shape == gt.shape:
                row["aee"] = aee(field_, gt, valid)
        rows.append(row)
    return rows


def _no_ref(net, lr):
    import torch
    from .imageio import to_image, to_tensor
    with torch.no_grad():
        net.eval()
        return np.clip(to_image(net(to_tensor(lr), None)), 0.0, 1.0)


def _video_rows(net, manifest: DatasetManifest, channel: str, scale: int):
    from .video_sr import restore_clip
    rows = []
    for rec in manifest:
        frames = [crop_to_multiple(f, scale) for f in read_clip(manifest.resolve(rec.input_path))]
        lr = [bicubic_downsample(f, scale) for f in frames]
        skip = set()
        ref = None
        if rec.ref_paths:
            ref = read_png(manifest.resolve(rec.ref_paths[0]))
        elif rec.extra.get("ref_frame_index") is not None:
            idx = int(rec.extra["ref_frame_index"])
            ref = frames[idx]
            skip.add(idx)                       # the reference frame is not scored
        if net == "bicubic":
            sr = [np.clip(bicubic_upsample(x, scale), 0.0, 1.0) for x in lr]
        else:
            sr = restore_clip(lr, ref, net)
        for i, (s, h) in enumerate(zip(sr, frames)):
            if i in skip:
                continue
            rows.append({"input": rec.input_path, "frame": i, "similarity": rec.similarity,
                         **_metrics(s, h, channel)})
    return rows


def evaluate(model, manifest, mode: str = "image", channel: str = "Y", plots_dir=None,
             scale: int = 4) -> EvalReport:
    """Score ``model`` (checkpoint path, built model, or ``"bicubic"``) on a manifest.

    HR inputs are degraded with the pinned bicubic x4 kernel; the model output
    is compared to the HR. Raises :class:`EvalInputError` when files are missing
    and ``MetricError`` when a metric cannot be computed.
    """
    start = time.perf_counter()
    if mode not in ("image", "video"):
        raise ValueError("mode must be 'image' or 'video'")
    if channel not in ("Y", "RGB"):
        raise MetricError("channel must be 'Y' or 'RGB'")
    manifest_path = None
    if not isinstance(manifest, DatasetManifest):
        manifest_path = Path(manifest)
        if not manifest_path.is_file():
            raise EvalInputError([f"manifest: {manifest_path}"])
        manifest = DatasetManifest.load(manifest_path)
    if len(manifest) == 0:
        raise EvalInputError(["manifest has no records"])
    missing = manifest.missing_paths()
    if missing:
        raise EvalInputError(missing)
    net, model_info = _load_model(model)
    config = {"mode": mode, "channel": channel, "scale": scale, **model_info,
              "manifest_sha256": hashlib.sha256(manifest.to_text().encode()).hexdigest()}
    rows = (_image_rows if mode == "image" else _video_rows)(net, manifest, channel, scale)
    report = EvalReport(rows, config)
    if plots_dir is not None:
        report.plots = write_plots(report, plots_dir)
    report.wall_clock = time.perf_counter() - start
    report.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    return report


def write_plots(report: EvalReport, out_dir) -> list[str]:
    """Bar charts of mean PSNR (and AEE when present) per group; returns file names."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = report.groups
    names = list(groups)
    written = []
    for key, label in (("psnr", "PSNR (dB)"), ("aee", "AEE (grid cells)")):
        vals = [groups[n].get(key) for n in names]
        if not any(v is not None and math.isfinite(v) for v in vals):
            continue
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        ax.bar(names, [v if v is not None and math.isfinite(v) else 0.0 for v in vals], color="#4477aa")
        ax.set_ylabel(label)
        ax.set_xlabel("group")
        fig.tight_layout()
        name = f"{key}_by_group.png"
        tmp = out / (name + ".tmp")
        fig.savefig(tmp, format="png", metadata={"Software": None})
        plt.close(fig)
        os.replace(tmp, out / name)
        written.append(name)
    return written
