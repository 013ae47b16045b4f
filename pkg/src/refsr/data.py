"""Datasets: manifests, degradations, synthetic pairs, benchmarks and toy content.

Manifest format (one JSON object per line, keys sorted, UTF-8)::

    {"input_path": "hr/0001.png", "ref_paths": ["refs/0001.png"], "split": "train",
     "similarity": "similar", ...extra keys...}

``input_path`` is an HR image (or, for video, a directory of numbered HR
frames); ``ref_paths`` may be empty. ``similarity`` is one of
``very_similar``, ``similar``, ``irrelevant``, ``none``. Relative paths are
resolved against the manifest's directory. Extra keys are carried verbatim
(benchmarks add ``group``, ``scale``, ``rotation``, ``homography`` and
``gt_path``; video manifests may add ``ref_frame_index``).
"""
from __future__ import annotations

import io
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .contrastive import TrainPair
from .homography import Homography, TransformConfig, _rng, gt_field, sample_homography, similarity_corners, warp_image
from .imageio import read_png, to_image, to_tensor, write_png
from .resize import bicubic_downsample, resize

log = logging.getLogger(__name__)

SIMILARITY_LEVELS = ("very_similar", "similar", "irrelevant", "none")
GROUPS = ("small", "medium", "large")


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    input_path: str
    ref_paths: list = field(default_factory=list)
    split: str = "test"
    similarity: str = "none"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.similarity not in SIMILARITY_LEVELS:
            raise ManifestError(f"similarity must be one of {SIMILARITY_LEVELS}, got {self.similarity!r}")
        self.ref_paths = list(self.ref_paths)

    def to_dict(self) -> dict:
        d = dict(self.extra)
        d.update(input_path=self.input_path, ref_paths=self.ref_paths, split=self.split,
                 similarity=self.similarity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        d = dict(d)
        try:
            base = {k: d.pop(k) for k in ("input_path",)}
        except KeyError:
            raise ManifestError(f"record without input_path: {d}") from None
        return cls(base["input_path"], d.pop("ref_paths", []), d.pop("split", "test"),
                   d.pop("similarity", "none"), d)


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def to_text(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.records)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_text(), encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        records = []
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{n}: {e}") from None
        return cls(records, path.parent)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def missing_paths(self) -> list[str]:
        out = []
        for r in self.records:
            for p in [r.input_path, *r.ref_paths, r.extra.get("gt_path")]:
                if p and not self.resolve(p).exists():
                    out.append(str(p))
        return out


# ---------------------------------------------------------------------------
# toy content


def procedural_texture(seed, size=(160, 160), octaves=(4, 8, 16, 32), contrast: float = 1.0) -> np.ndarray:
    """Multi-octave colour value noise in ``[0, 1]``, shape ``(H, W, 3)``.

    ``size`` is ``(H, W)``. Every octave is a random grid upsampled with the
    pinned bicubic kernel; finer octaves get smaller amplitude.
    """
    rng = _rng(seed)
    h, w = size
    acc = np.zeros((h, w, 3))
    for k, cells in enumerate(octaves):
        gh = max(2, int(round(cells * h / max(h, w))))
        gw = max(2, int(round(cells * w / max(h, w))))
        grid = rng.standard_normal((gh, gw, 3))
        acc += resize(grid, (h, w), antialias=False) / (1.0 + 0.5 * k)
    mix = rng.uniform(-1, 1, size=(3, 3)) + np.eye(3)
    acc = acc @ mix.T
    acc = (acc - acc.mean()) / (acc.std() + 1e-8)
    return np.clip(0.5 + 0.18 * contrast * acc, 0.0, 1.0).astype(np.float32)


def texture_dataset(n: int, seed: int = 0, size=(160, 160)) -> list[np.ndarray]:
    return [procedural_texture((seed, i), size) for i in range(n)]


# ---------------------------------------------------------------------------
# synthetic pairs


def make_homography_pair(hr: np.ndarray, transform: TransformConfig, seed, crop: int = 160,
                         scale_factor: int = 4) -> TrainPair:
    """Random ``crop x crop`` window of ``hr``, its LR version, and a homography-warped reference."""
    h, w = hr.shape[:2]
    if h < crop or w < crop:
        raise ValueError(f"image is {h}x{w}; a {crop}x{crop} crop needs at least that size")
    if crop % scale_factor:
        raise ValueError(f"crop {crop} is not divisible by scale factor {scale_factor}")
    rng = _rng(seed)
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    hr_crop = np.ascontiguousarray(hr[y0:y0 + crop, x0:x0 + crop, :3]).astype(np.float32)
    hmg = sample_homography(seed if not isinstance(seed, (tuple, list)) else tuple(seed) + (1,),
                            transform, size=(crop, crop))
    if np.array_equal(hmg.matrix, np.eye(3)):
        ref = hr_crop.copy()
    else:
        ref = to_image(warp_image(to_tensor(hr_crop, torch.float64), hmg)[0])
    lr = bicubic_downsample(hr_crop, scale_factor)
    return TrainPair(lr, ref, hmg, hr_crop, scale_factor)


def synthetic_pairs(n: int, seed: int = 0, transform: TransformConfig = TransformConfig(),
                    crop: int = 160, sources=None) -> list[TrainPair]:
    """``n`` pairs; pair ``i`` depends only on ``(seed, i)``."""
    pairs = []
    for i in range(n):
        src = procedural_texture((seed, i), (crop, crop)) if sources is None else sources[i % len(sources)]
        pairs.append(make_homography_pair(src, transform, (seed, i), crop))
    return pairs


# ---------------------------------------------------------------------------
# transformation-controlled benchmark


@dataclass(frozen=True)
class TransformBenchmarkSpec:
    """Scale factors are drawn from ``scale_range``; rotation magnitudes (degrees)
    from ``rotation_range`` with a random sign."""
    group: str
    scale_range: tuple = (1.0, 1.0)
    rotation_range: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"group must be one of {GROUPS}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("bad scale range")
        if not 0 <= self.rotation_range[0] <= self.rotation_range[1]:
            raise ValueError("bad rotation range")

    @classmethod
    def for_group(cls, group: str, axis: str = "both", seed: int = 0) -> "TransformBenchmarkSpec":
        """Default ranges; ``axis`` of ``"scale"`` or ``"rotation"`` isolates one factor."""
        scale = DEFAULT_SCALE_RANGES[group] if axis in ("both", "scale") else (1.0, 1.0)
        rot = DEFAULT_ROTATION_RANGES[group] if axis in ("both", "rotation") else (0.0, 0.0)
        return cls(group, scale, rot, seed)

    def envelope(self) -> tuple:
        """(min scale, max scale, max |rotation|)."""
        return (self.scale_range[0], self.scale_range[1], self.rotation_range[1])


DEFAULT_SCALE_RANGES = {"small": (0.95, 1.05), "medium": (0.8, 1.25), "large": (0.5, 2.0)}
DEFAULT_ROTATION_RANGES = {"small": (0.0, 5.0), "medium": (5.0, 20.0), "large": (20.0, 45.0)}


def check_nesting(specs) -> None:
    """Envelopes must widen from small to medium to large."""
    by = {s.group: s.envelope() for s in specs}
    order = [g for g in GROUPS if g in by]
    for a, b in zip(order, order[1:]):
        ea, eb = by[a], by[b]
        if not (eb[0] <= ea[0] and eb[1] >= ea[1] and eb[2] >= ea[2]):
            raise ValueError(f"group {b} does not contain group {a}")


def sample_benchmark_transform(spec: TransformBenchmarkSpec, index: int, size) -> tuple[Homography, float, float]:
    rng = _rng((spec.seed, GROUPS.index(spec.group), index))
    scale = float(rng.uniform(*spec.scale_range))
    angle = float(rng.uniform(*spec.rotation_range)) * (1 if rng.random() < 0.5 else -1)
    w, h = size
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    return Homography.from_points(src, similarity_corners(size, scale, angle)), scale, angle


def benchmark_pair(hr: np.ndarray, spec: TransformBenchmarkSpec, index: int, stride: int = 4):
    """Reference = transformed HR; returns ``(ref, homography, gt, valid, scale, angle)``."""
    h, w = hr.shape[:2]
    hmg, scale, angle = sample_benchmark_transform(spec, index, (w, h))
    ref = to_image(warp_image(to_tensor(hr, torch.float64), hmg)[0])
    grid = (-(-h // stride), -(-w // stride))
    gt, valid = gt_field(grid, hmg, stride, ref_grid_shape=grid)
    return ref, hmg, gt, valid, scale, angle


def build_transform_benchmark(inputs, spec: TransformBenchmarkSpec, out_dir: str | os.PathLike,
                              stride: int = 4, manifest_name: str | None = None) -> DatasetManifest:
    """Write transformed references and ground-truth fields for each HR input.

    ``inputs`` is a :class:`DatasetManifest` or a list of HR image paths.
    """
    out = Path(out_dir)
    (out / spec.group).mkdir(parents=True, exist_ok=True)
    if isinstance(inputs, DatasetManifest):
        paths = [inputs.resolve(r.input_path) for r in inputs]
    else:
        paths = [Path(p) for p in inputs]
    records = []
    for i, p in enumerate(paths):
        hr = read_png(p)
        ref, hmg, gt, valid, scale, angle = benchmark_pair(hr, spec, i, stride)
        stem = f"{spec.group}/{i:04d}"
        write_png(out / f"{stem}_ref.png", ref)
        _save_npz(out / f"{stem}_gt.npz", gt=gt, valid=valid)
        records.append(ManifestRecord(
            os.path.relpath(p, out), [f"{stem}_ref.png"], "test", "none",
            {"group": spec.group, "scale": scale, "rotation": angle, "homography": hmg.tolist(),
             "gt_path": f"{stem}_gt.npz", "stride": stride}))
    manifest = DatasetManifest(records, out)
    manifest.save(out / (manifest_name or f"benchmark_{spec.group}.jsonl"))
    return manifest


def _save_npz(path: Path, **arrays) -> None:
    """``np.savez`` layout with fixed zip timestamps, so equal arrays give equal bytes."""
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    os.replace(tmp, path)


def load_gt(path) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as z:
        return z["gt"], z["valid"]


# ---------------------------------------------------------------------------
# web-referenced dataset assembly


@dataclass(frozen=True)
class RescalePolicy:
    """Resize a reference when its longer side is outside ``tolerance`` of the query's."""
    tolerance: float = 0.1


@dataclass
class AssemblyReport:
    kept: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    rescaled: list = field(default_factory=list)

    @property
    def dropped_count(self) -> int:
        return len(self.dropped)


class SelectionError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("dangling selection entries:\n" + "\n".join(f"  - {p}" for p in self.problems))


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def _images(d: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def assemble_refsr_dataset(query_dir, candidate_pool_dir, selection_file, out_dir,
                           rescale_policy: RescalePolicy = RescalePolicy()) -> tuple[DatasetManifest, AssemblyReport]:
    """Pair each query with its hand-picked reference from the candidate pool.

    ``selection_file`` is a JSON object ``{query_name: candidate_name or null}``;
    candidate names are relative to ``candidate_pool_dir`` (per-query pools such
    as ``"0001/07.jpg"`` work). Queries without a selection are dropped.
    """
    qdir, pdir, out = Path(query_dir), Path(candidate_pool_dir), Path(out_dir)
    text = Path(selection_file).read_text(encoding="utf-8").strip()
    selection = json.loads(text) if text else {}
    queries = _images(qdir)
    problems = []
    for q, c in selection.items():
        if q not in queries:
            problems.append(f"{q}: query image not found in {qdir}")
        if c is not None and not (pdir / c).is_file():
            problems.append(f"{q}: candidate {c} not found in {pdir}")
    if problems:
        raise SelectionError(problems)

    (out / "refs").mkdir(parents=True, exist_ok=True)
    report = AssemblyReport()
    records = []
    for name, qpath in queries.items():
        cand = selection.get(name)
        if cand is None:
            report.dropped.append(name)
            log.info("dropping %s: no reference selected", name)
            continue
        query = read_png(qpath)
        ref = read_png(pdir / cand)
        qmax, rmax = max(query.shape[:2]), max(ref.shape[:2])
        if abs(rmax - qmax) > rescale_policy.tolerance * qmax:
            f = qmax / rmax
            ref = np.clip(resize(ref, (max(1, round(ref.shape[0] * f)), max(1, round(ref.shape[1] * f)))), 0, 1)
            report.rescaled.append(name)
        ref_rel = f"refs/{Path(name).stem}.png"
        write_png(out / ref_rel, ref)
        records.append(ManifestRecord(os.path.relpath(qpath, out), [ref_rel], "test", "none",
                                      {"candidate": str(cand)}))
        report.kept.append(name)
    manifest = DatasetManifest(records, out)
    manifest.save(out / "manifest.jsonl")
    return manifest, report


# ---------------------------------------------------------------------------
# toy video


def _shift_crop(canvas: np.ndarray, x: float, y: float, size: int) -> np.ndarray:
    """``size x size`` window of ``canvas`` with top-left at sub-pixel ``(x, y)``."""
    t = to_tensor(canvas, torch.float64)
    hmg = Homography.translation(-x, -y)
    out = warp_image(t, hmg, out_size=(size, size))[0]
    return to_image(out)


@dataclass
class ToyClip:
    hr: list
    lr: list
    refs: dict


def toy_clip(seed, n_frames: int = 10, lr_size: int = 32, scale_factor: int = 4,
             speed=(1.5, 0.75), canvas_margin: int = 96) -> ToyClip:
    """A camera panning over a procedural canvas.

    ``refs`` holds HR views of decreasing similarity: ``very_similar`` is the
    view one step before the first frame, ``similar`` a view half a frame
    away, ``irrelevant`` a different texture.
    """
    hr_size = lr_size * scale_factor
    rng = _rng(seed)
    span = int(hr_size + canvas_margin + abs(speed[0]) * n_frames * 2 + abs(speed[1]) * n_frames * 2)
    canvas = procedural_texture((*_seed_tuple(seed), 7), (span, span), _octaves_for(span))
    x0 = float(rng.uniform(hr_size * 0.5, canvas_margin))
    y0 = float(rng.uniform(hr_size * 0.5, canvas_margin))
    hr = [_shift_crop(canvas, x0 + speed[0] * i, y0 + speed[1] * i, hr_size) for i in range(n_frames)]
    lr = [bicubic_downsample(f, scale_factor) for f in hr]
    refs = {
        "very_similar": _shift_crop(canvas, x0 - speed[0], y0 - speed[1], hr_size),
        "similar": _shift_crop(canvas, x0 - hr_size * 0.5, y0 - hr_size * 0.5, hr_size),
        "irrelevant": procedural_texture((*_seed_tuple(seed), 99), (hr_size, hr_size), _octaves_for(hr_size)),
    }
    return ToyClip(hr, lr, refs)


def _octaves_for(side: int, cell_px=(24, 12, 6, 3)) -> tuple:
    """Octave grid counts for fixed feature sizes in pixels, whatever the canvas size."""
    return tuple(max(2, round(side / px)) for px in cell_px)


def _seed_tuple(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)


def write_clip(frames, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_png(d / f"{i:05d}.png", f)


def read_clip(directory) -> list[np.ndarray]:
    d = Path(directory)
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise FileNotFoundError(f"no PNG frames in {d}")
    return [read_png(p) for p in files]
