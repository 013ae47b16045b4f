"""Command-line entry point: ``refsr <stage> ...``.

Every stage writes its artifacts atomically and leaves a run manifest
(``<artifact>.run.json`` or ``<dir>/run.json``) holding the command line, the
resolved configuration and its fingerprint, and SHA-256 hashes of inputs and
outputs. Run manifests carry no timestamps, so repeating a run with the same
inputs reproduces them byte for byte.

Exit codes: 0 success, 2 missing input or unmet stage dependency, 3 metric
failure or diverged training.

``REFSR_DATA_ROOT``, when set, is searched for relative data/manifest paths
that do not exist under the working directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("refsr")

PRESETS = {
    "no-distill": ("train-student", {"kl_weight": 0.0}),
    "no-dyn-agg": ("train-sr", {"dyn_agg": False}),
    "no-contrastive": ("train-sr", {"matcher": "fixed"}),
    "no-attention": ("train-vsr", {"attention": False}),
    "flow-align": ("train-vsr", {"ref_align": "flow"}),
}


class StageError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _data_path(p) -> Path:
    path = Path(p)
    root = os.environ.get("REFSR_DATA_ROOT")
    if not path.exists() and root and not path.is_absolute() and (Path(root) / path).exists():
        return Path(root) / path
    return path


def _require(path, what: str) -> Path:
    if path is None:
        raise StageError(f"missing dependency: {what} (pass it explicitly)")
    p = _data_path(path)
    if not p.exists():
        raise StageError(f"missing dependency: {what} not found at {p}")
    return p


def _read_config(path) -> dict:
    if path is None:
        return {}
    p = _require(path, "config file")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise StageError(f"config {p} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise StageError(f"config {p} must hold a JSON object")
    return cfg


def _apply_preset(stage: str, preset: str | None, cfg: dict) -> dict:
    if preset is None:
        return cfg
    allowed = {"train-sr": ("no-dyn-agg", "no-contrastive"),
               "train-vsr": ("no-attention", "flow-align", "no-contrastive"),
               "train-student": ("no-distill",)}.get(stage, ())
    if preset not in allowed:
        raise StageError(f"preset {preset!r} does not apply to {stage}")
    overrides = dict(PRESETS[preset][1])
    return {**cfg, **overrides}


def _split_config(cfg: dict, *classes) -> list[dict]:
    parts = [{} for _ in classes]
    for k, v in cfg.items():
        for i, cls in enumerate(classes):
            if k in {f.name for f in fields(cls)}:
                parts[i][k] = v
                break
        else:
            raise StageError(f"unknown configuration key {k!r}")
    return parts


def _seed_config(cfg: dict, seed):
    if seed is not None:
        cfg = {**cfg, "seed": int(seed)}
    return cfg


def _hash_tree(paths) -> dict:
    """SHA-256 per file; a ``{path: hash}`` mapping passes through unchanged."""
    from .evaluate import sha256_file
    out = {}
    if isinstance(paths, dict):
        return {str(k): v for k, v in paths.items()}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file() and not f.name.endswith(".run.json") and f.name != "run.json":
                    out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


def _write_run_manifest(where: Path, stage: str, argv, config: dict, inputs, artifacts, extra=None):
    from .evaluate import canonical_json, fingerprint
    doc = {"stage": stage, "argv": list(argv), "config": config, "config_fingerprint": fingerprint(config),
           "inputs": _hash_tree(inputs), "artifacts": _hash_tree(artifacts)}
    doc.update(extra or {})
    where.parent.mkdir(parents=True, exist_ok=True)
    tmp = where.with_name(where.name + ".tmp")
    tmp.write_text(json.dumps(json.loads(canonical_json(doc)), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, where)


def _run_file(out: Path) -> Path:
    return out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")


def _load_pairs(manifest_path: Path):
    """Training pairs from a ``make-pairs`` manifest."""
    from .contrastive import TrainPair
    from .data import DatasetManifest
    from .homography import Homography
    from .imageio import crop_to_multiple, read_png
    from .resize import bicubic_downsample
    manifest = DatasetManifest.load(manifest_path)
    missing = manifest.missing_paths()
    if missing:
        raise StageError("missing training files: " + ", ".join(missing))
    pairs = []
    for rec in manifest:
        if "homography" not in rec.extra or not rec.ref_paths:
            raise StageError(f"record {rec.input_path} has no reference/homography; build it with make-pairs")
        hr = crop_to_multiple(read_png(manifest.resolve(rec.input_path)), 4)
        ref = read_png(manifest.resolve(rec.ref_paths[0]))
        pairs.append(TrainPair(bicubic_downsample(hr, 4), ref, Homography(np.array(rec.extra["homography"])), hr, 4))
    if not pairs:
        raise StageError(f"manifest {manifest_path} has no records")
    return pairs


def _load_matcher(path):
    from .contrastive import Matcher
    m = Matcher.load(path)
    if m.kind != "student":
        raise StageError(f"{path} holds a {m.kind} matcher; SR stages need the student checkpoint")
    return m


# ---------------------------------------------------------------------------
# stages


def cmd_make_pairs(args):
    from .data import DatasetManifest, ManifestRecord, make_homography_pair, procedural_texture
    from .homography import TransformConfig
    from .imageio import read_png, write_png
    cfg = _read_config(args.config)
    try:
        transform = TransformConfig(**cfg)
    except TypeError as e:
        raise StageError(f"bad transform config: {e}") from None
    out = Path(args.out)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    inputs = []
    if args.procedural:
        sources = None
    else:
        src = _require(args.sources, "--sources manifest (or pass --procedural)")
        inputs.append(src)
        m = DatasetManifest.load(src)
        sources = [read_png(m.resolve(r.input_path)) for r in m]
        if not sources:
            raise StageError(f"source manifest {src} is empty")
    records = []
    for i in range(args.n):
        img = procedural_texture((args.seed, i), (args.crop, args.crop)) if sources is None else sources[i % len(sources)]
        pair = make_homography_pair(img, transform, (args.seed, i), args.crop)
        hr_rel, ref_rel = f"pairs/{i:05d}_hr.png", f"pairs/{i:05d}_ref.png"
        write_png(out / hr_rel, pair.hr_input)
        write_png(out / ref_rel, pair.hr_ref)
        records.append(ManifestRecord(hr_rel, [ref_rel], "train", "none", {"homography": pair.homography.tolist()}))
    DatasetManifest(records, out).save(out / "manifest.jsonl")
    if args.clips:
        _write_clips(out, args.clips, args.seed, args.clip_frames, args.clip_size)
    config = {"n": args.n, "crop": args.crop, "seed": args.seed, "procedural": bool(args.procedural),
              "clips": args.clips, "clip_frames": args.clip_frames, "clip_size": args.clip_size,
              **asdict(transform)}
    _write_run_manifest(out / "run.json", "make-pairs", args.argv, config, inputs, [out])
    print(f"wrote {args.n} pairs to {out}")


def _write_clips(out: Path, n: int, seed: int, frames: int, size: int):
    """Toy panning clips; each clip gets three references of decreasing similarity."""
    from .data import DatasetManifest, ManifestRecord, toy_clip, write_clip
    from .imageio import write_png
    train, test = [], []
    for i in range(n):
        clip = toy_clip((seed, i), n_frames=frames, lr_size=size)
        d = f"clips/{i:04d}"
        write_clip(clip.hr, out / d / "hr")
        for level, img in clip.refs.items():
            write_png(out / d / f"ref_{level}.png", img)
        train.append(ManifestRecord(f"{d}/hr", [f"{d}/ref_very_similar.png"], "train", "very_similar"))
        for level in clip.refs:
            test.append(ManifestRecord(f"{d}/hr", [f"{d}/ref_{level}.png"], "test", level))
        test.append(ManifestRecord(f"{d}/hr", [], "test", "none"))
    DatasetManifest(train, out).save(out / "clips_train.jsonl")
    DatasetManifest(test, out).save(out / "clips_test.jsonl")


def cmd_make_benchmark(args):
    from .data import DEFAULT_ROTATION_RANGES, DEFAULT_SCALE_RANGES, DatasetManifest, TransformBenchmarkSpec, \
        build_transform_benchmark, check_nesting
    src = _require(args.inputs, "--inputs manifest of HR images")
    out = Path(args.out)
    specs = [TransformBenchmarkSpec.for_group(g, args.axis, args.seed) for g in args.groups.split(",")]
    if len(specs) > 1:
        check_nesting(specs)
    manifest = DatasetManifest.load(src)
    for spec in specs:
        build_transform_benchmark(manifest, spec, out)
    config = {"groups": args.groups, "axis": args.axis, "seed": args.seed,
              "scale_ranges": DEFAULT_SCALE_RANGES, "rotation_ranges": DEFAULT_ROTATION_RANGES}
    _write_run_manifest(out / "run.json", "make-benchmark", args.argv, config, [src], [out])
    print(f"wrote benchmark groups {args.groups} to {out}")


def cmd_assemble_dataset(args):
    from .data import RescalePolicy, SelectionError, assemble_refsr_dataset
    q = _require(args.queries, "--queries directory")
    p = _require(args.pool, "--pool directory")
    s = _require(args.selection, "--selection file")
    out = Path(args.out)
    try:
        _, report = assemble_refsr_dataset(q, p, s, out, RescalePolicy(args.tolerance))
    except SelectionError as e:
        raise StageError(str(e)) from None
    _write_run_manifest(out / "run.json", "assemble-dataset", args.argv, {"tolerance": args.tolerance},
                        [q, p, s], [out], {"kept": report.kept, "dropped": report.dropped,
                                           "rescaled": report.rescaled})
    print(f"kept {len(report.kept)}, dropped {report.dropped_count}, rescaled {len(report.rescaled)}")
    if report.dropped_count:
        log.warning("dropped queries without a reference: %s", ", ".join(report.dropped))


def _train_matcher(args, kind):
    from .contrastive import ContrastiveLossConfig, Matcher, save_training_checkpoint, train_student, train_teacher
    data = _require(args.data, "--data manifest (from make-pairs)")
    teacher = None
    inputs = [data]
    if kind == "student":
        tpath = _require(args.teacher, "teacher checkpoint (--teacher, from train-teacher)")
        inputs.append(tpath)
        teacher = Matcher.load(tpath)
        if teacher.kind != "teacher":
            raise StageError(f"{tpath} is not a teacher checkpoint")
    raw = _seed_config(_apply_preset(f"train-{kind}", args.preset, _read_config(args.config)), args.seed)
    try:
        cfg = ContrastiveLossConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise StageError(f"bad matcher config: {e}") from None
    if args.config:
        inputs.append(_data_path(args.config))
    pairs = _load_pairs(data)
    result = train_teacher(pairs, cfg) if kind == "teacher" else train_student(pairs, teacher, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_training_checkpoint(result, out, cfg, seed=cfg.seed)
    _write_run_manifest(_run_file(out), f"train-{kind}", args.argv, cfg.to_dict(), inputs, [out],
                        {"final": result.history[-1] if result.history else None})
    print(f"saved {kind} matcher to {out}")


def cmd_train_teacher(args):
    _train_matcher(args, "teacher")


def cmd_train_student(args):
    _train_matcher(args, "student")


def _sr_samples(manifest_path):
    from .data import DatasetManifest
    from .image_sr import SRSample
    from .imageio import crop_to_multiple, read_png
    from .resize import bicubic_downsample
    manifest = DatasetManifest.load(manifest_path)
    missing = manifest.missing_paths()
    if missing:
        raise StageError("missing training files: " + ", ".join(missing))
    out = []
    for rec in manifest:
        if not rec.ref_paths:
            continue
        hr = crop_to_multiple(read_png(manifest.resolve(rec.input_path)), 16)
        out.append(SRSample(bicubic_downsample(hr, 4), read_png(manifest.resolve(rec.ref_paths[0])), hr))
    if not out:
        raise StageError(f"no records with references in {manifest_path}")
    return out


def cmd_train_sr(args):
    from .contrastive import FixedFeatureMatcher
    from .image_sr import EncoderFeatures, SRModelConfig, SRTrainConfig, train_sr
    raw = _seed_config(_apply_preset("train-sr", args.preset, _read_config(args.config)), args.seed)
    use_fixed = raw.pop("matcher", None) == "fixed"
    data = _require(args.data, "--data manifest")
    inputs = [data] + ([_data_path(args.config)] if args.config else [])
    model_raw, train_raw = _split_config(raw, SRModelConfig, SRTrainConfig)
    model_cfg, train_cfg = SRModelConfig(**model_raw), SRTrainConfig(**train_raw)
    extractor = None
    if use_fixed:
        matcher = FixedFeatureMatcher()
        if train_cfg.lambda_per > 0 and train_cfg.iterations > train_cfg.rec_only_iters:
            # fixed-feature matching still borrows a trained encoder for the perceptual loss
            mpath = _require(args.matcher, "student checkpoint (--matcher) for the perceptual loss features")
            inputs.append(mpath)
            extractor = EncoderFeatures(_load_matcher(mpath).ref_encoder)
    else:
        mpath = _require(args.matcher, "student checkpoint (--matcher, from train-student)")
        inputs.append(mpath)
        matcher = _load_matcher(mpath)
    model, _, history = train_sr(_sr_samples(data), matcher, train_cfg, model_cfg, feature_extractor=extractor)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, train=asdict(train_cfg), seed=train_cfg.seed)
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "matcher": "fixed" if use_fixed else "student"}
    _write_run_manifest(_run_file(out), "train-sr", args.argv, config, inputs, [out], {"final": history[-1]})
    print(f"saved image SR weights to {out}")


def _vsr_samples(manifest_path):
    from .data import DatasetManifest, read_clip
    from .imageio import crop_to_multiple, read_png
    from .resize import bicubic_downsample
    from .video_sr import VideoSample
    manifest = DatasetManifest.load(manifest_path)
    missing = manifest.missing_paths()
    if missing:
        raise StageError("missing training files: " + ", ".join(missing))
    out = []
    for rec in manifest:
        hr = [crop_to_multiple(f, 4) for f in read_clip(manifest.resolve(rec.input_path))]
        ref = read_png(manifest.resolve(rec.ref_paths[0])) if rec.ref_paths else None
        out.append(VideoSample([bicubic_downsample(f, 4) for f in hr], hr, ref))
    if not out:
        raise StageError(f"manifest {manifest_path} has no clips")
    return out


def cmd_train_vsr(args):
    from .contrastive import FixedFeatureMatcher
    from .video_sr import VSRConfig, VSRTrainConfig, train_vsr
    raw = _seed_config(_apply_preset("train-vsr", args.preset, _read_config(args.config)), args.seed)
    use_fixed = raw.pop("matcher", None) == "fixed"
    data = _require(args.data, "--data manifest of clips")
    inputs = [data] + ([_data_path(args.config)] if args.config else [])
    model_raw, train_raw = _split_config(raw, VSRConfig, VSRTrainConfig)
    model_cfg, train_cfg = VSRConfig(**model_raw), VSRTrainConfig(**train_raw)
    if use_fixed:
        matcher = FixedFeatureMatcher()
    elif model_cfg.ref_align == "flow":
        matcher = None
    else:
        mpath = _require(args.matcher, "student checkpoint (--matcher, from train-student)")
        inputs.append(mpath)
        matcher = _load_matcher(mpath)
    model, history = train_vsr(_vsr_samples(data), matcher, train_cfg, model_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, train=asdict(train_cfg), seed=train_cfg.seed)
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg), "matcher": "fixed" if use_fixed else "student"}
    _write_run_manifest(_run_file(out), "train-vsr", args.argv, config, inputs, [out], {"final": history[-1]})
    print(f"saved video SR weights to {out}")


def cmd_infer_sr(args):
    from .image_sr import RefImageSR, restore
    from .imageio import read_png, write_png
    w = _require(args.weights, "--weights (from train-sr)")
    lr_p, ref_p = _require(args.lr, "--lr image"), _require(args.ref, "--ref image")
    model = RefImageSR.load(w)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, restore(read_png(lr_p), read_png(ref_p), model))
    _write_run_manifest(_run_file(out), "infer-sr", args.argv, {}, [w, lr_p, ref_p], [out])
    print(f"wrote {out}")


def cmd_infer_vsr(args):
    from .data import read_clip, write_clip
    from .imageio import read_png
    from .video_sr import RefVideoSR, restore_clip
    w = _require(args.weights, "--weights (from train-vsr)")
    clip = _require(args.clip, "--clip directory")
    ref_p = _require(args.ref, "--ref image") if args.ref else None
    model = RefVideoSR.load(w)
    out = Path(args.out)
    frames = restore_clip(read_clip(clip), read_png(ref_p) if ref_p else None, model)
    write_clip(frames, out)
    _write_run_manifest(out / "run.json", "infer-vsr", args.argv, {}, [w, clip] + ([ref_p] if ref_p else []), [out])
    print(f"wrote {len(frames)} frames to {out}")


def cmd_eval(args):
    from .evaluate import EvalInputError, evaluate
    from .metrics import MetricError
    weights = args.weights
    inputs = []
    if weights != "bicubic":
        weights = _require(weights, "--weights checkpoint (or 'bicubic')")
        inputs.append(weights)
    manifest = _require(args.manifest, "--manifest")
    inputs.append(manifest)
    try:
        report = evaluate(weights, manifest, args.mode, args.channel, args.plots)
    except EvalInputError as e:
        raise StageError(str(e), 2) from None
    except MetricError as e:
        raise StageError(f"metric failure: {e}", 3) from None
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    # the report itself carries a timestamp, so it is identified by its content hash
    artifacts = {str(out): report.content_hash}
    if args.plots:
        artifacts.update(_hash_tree([Path(args.plots) / p for p in report.plots]))
    _write_run_manifest(_run_file(out), "eval", args.argv, report.config, inputs, artifacts)
    agg = report.aggregate
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(agg.items())))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refsr", description="Reference-based super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="stage", required=True, metavar="stage")

    def stage(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    def train_args(sp, preset_choices):
        sp.add_argument("--config", help="flat JSON file of hyperparameters")
        sp.add_argument("--data", required=True, help="training manifest (JSONL)")
        sp.add_argument("--out", required=True, help="checkpoint path to write")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--preset", choices=preset_choices, help="ablation preset")

    sp = stage("make-pairs", cmd_make_pairs, "Synthesize homography-warped training pairs.")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, default=500, help="number of pairs")
    sp.add_argument("--crop", type=int, default=160, help="HR crop side (divisible by 4)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--procedural", action="store_true", help="use procedural textures as sources")
    sp.add_argument("--sources", help="manifest of HR source images")
    sp.add_argument("--config", help="JSON transform config (scale_min, scale_max, rotation_deg, jitter)")
    sp.add_argument("--clips", type=int, default=0, help="also write this many toy video clips")
    sp.add_argument("--clip-frames", type=int, default=10, help="frames per toy clip")
    sp.add_argument("--clip-size", type=int, default=32, help="LR side of toy clip frames")

    sp = stage("make-benchmark", cmd_make_benchmark, "Build the small/medium/large transformation benchmark.")
    sp.add_argument("--inputs", required=True, help="manifest of HR images")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--groups", default="small,medium,large", help="comma-separated groups")
    sp.add_argument("--axis", choices=("both", "scale", "rotation"), default="both")
    sp.add_argument("--seed", type=int, default=0)

    sp = stage("assemble-dataset", cmd_assemble_dataset, "Pair queries with hand-selected references.")
    sp.add_argument("--queries", required=True, help="directory of query images")
    sp.add_argument("--pool", required=True, help="candidate pool directory")
    sp.add_argument("--selection", required=True, help="JSON {query: candidate or null}")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--tolerance", type=float, default=0.1, help="allowed relative size mismatch")

    sp = stage("train-teacher", cmd_train_teacher, "Train the HR-HR correspondence network.")
    train_args(sp, None)
    sp = stage("train-student", cmd_train_student, "Train the LR-HR correspondence network with distillation.")
    train_args(sp, ("no-distill",))
    sp.add_argument("--teacher", help="teacher checkpoint")
    sp = stage("train-sr", cmd_train_sr, "Train the reference-based image SR network.")
    train_args(sp, ("no-dyn-agg", "no-contrastive"))
    sp.add_argument("--matcher", help="student matcher checkpoint")
    sp = stage("train-vsr", cmd_train_vsr, "Train the reference-based video SR network.")
    train_args(sp, ("no-attention", "flow-align", "no-contrastive"))
    sp.add_argument("--matcher", help="student matcher checkpoint")

    sp = stage("infer-sr", cmd_infer_sr, "Super-resolve one image with a reference.")
    sp.add_argument("--lr", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", required=True)

    sp = stage("infer-vsr", cmd_infer_vsr, "Super-resolve a clip directory of numbered PNG frames.")
    sp.add_argument("--clip", required=True)
    sp.add_argument("--ref", help="reference image (omit for no reference)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", required=True)

    sp = stage("eval", cmd_eval, "Score a model on a manifest and write a JSON report.")
    sp.add_argument("--weights", required=True, help="SR checkpoint or 'bicubic'")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--mode", choices=("image", "video"), default="image")
    sp.add_argument("--channel", choices=("Y", "RGB"), default="Y")
    sp.add_argument("--report", required=True, help="report JSON path")
    sp.add_argument("--plots", help="directory for per-group plots")
    return p


def main(argv=None) -> int:
    from .contrastive import TrainingDivergedError
    from .descriptors import ConfigurationError
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = ["refsr", *argv]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except StageError as e:
        print(f"refsr {args.stage}: {e}", file=sys.stderr)
        return e.code
    except ConfigurationError as e:
        print(f"refsr {args.stage}: {e}", file=sys.stderr)
        return 2
    except TrainingDivergedError as e:
        print(f"refsr {args.stage}: training diverged: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
