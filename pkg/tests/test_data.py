import json

import numpy as np
import pytest

from refsr.data import (DatasetManifest, ManifestError, ManifestRecord, RescalePolicy, SelectionError,
                        TransformBenchmarkSpec, assemble_refsr_dataset, benchmark_pair, build_transform_benchmark,
                        check_nesting, load_gt, make_homography_pair, procedural_texture, read_clip,
                        synthetic_pairs, toy_clip, write_clip)
from refsr.homography import TransformConfig
from refsr.imageio import read_png, write_png
from refsr.metrics import psnr


def test_procedural_texture_is_seeded_and_bounded():
    a, b = procedural_texture(1, (40, 30)), procedural_texture(1, (40, 30))
    assert a.shape == (40, 30, 3) and a.dtype == np.float32
    assert np.array_equal(a, b) and not np.array_equal(a, procedural_texture(2, (40, 30)))
    assert a.min() >= 0 and a.max() <= 1 and a.std() > 0.05


def test_synthetic_pair_shapes_and_independence():
    pairs = synthetic_pairs(3, seed=5, crop=48)
    assert pairs[0].lr_input.shape == (12, 12, 3) and pairs[0].hr_ref.shape == (48, 48, 3)
    again = synthetic_pairs(2, seed=5, crop=48)
    assert np.array_equal(pairs[1].hr_ref, again[1].hr_ref)


def test_identity_transform_gives_identical_reference():
    p = make_homography_pair(procedural_texture(0, (64, 64)), TransformConfig.identity(), 3, crop=32)
    assert np.array_equal(p.hr_ref, p.hr_input)
    with pytest.raises(ValueError):
        make_homography_pair(procedural_texture(0, (16, 16)), TransformConfig(), 0, crop=32)
    with pytest.raises(ValueError):
        make_homography_pair(procedural_texture(0, (64, 64)), TransformConfig(), 0, crop=30)


def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord("a.png", ["r.png"], "train", "similar", {"group": "small"}),
            ManifestRecord("b.png")]
    m = DatasetManifest(recs, tmp_path)
    m.save(tmp_path / "m.jsonl")
    back = DatasetManifest.load(tmp_path / "m.jsonl")
    assert back.to_text() == m.to_text()
    assert back.records[0].extra == {"group": "small"}
    assert sorted(back.missing_paths()) == ["a.png", "b.png", "r.png"]
    line = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert list(line) == sorted(line)


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        ManifestRecord("a.png", similarity="kinda")
    (tmp_path / "bad.jsonl").write_text('{"ref_paths": []}\n')
    with pytest.raises(ManifestError):
        DatasetManifest.load(tmp_path / "bad.jsonl")
    (tmp_path / "worse.jsonl").write_text("{not json\n")
    with pytest.raises(ManifestError):
        DatasetManifest.load(tmp_path / "worse.jsonl")
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "none.jsonl")


def test_benchmark_groups_nest():
    specs = [TransformBenchmarkSpec.for_group(g) for g in ("small", "medium", "large")]
    check_nesting(specs)
    with pytest.raises(ValueError):
        check_nesting([TransformBenchmarkSpec("small", (0.5, 2.0)), TransformBenchmarkSpec("medium", (0.9, 1.1))])
    with pytest.raises(ValueError):
        TransformBenchmarkSpec("huge")
    assert TransformBenchmarkSpec.for_group("large", axis="scale").rotation_range == (0.0, 0.0)


def test_benchmark_pair_draws_inside_ranges():
    hr = procedural_texture(0, (64, 64))
    spec = TransformBenchmarkSpec.for_group("medium")
    for i in range(10):
        ref, hmg, gt, valid, scale, angle = benchmark_pair(hr, spec, i)
        assert 0.8 <= scale <= 1.25 and 5 <= abs(angle) <= 20
        assert gt.shape == (16, 16, 2) and ref.shape == hr.shape


def test_build_benchmark_is_byte_deterministic(tmp_path):
    write_png(tmp_path / "in.png", procedural_texture(0, (32, 32)))
    spec = TransformBenchmarkSpec.for_group("small", seed=3)
    build_transform_benchmark([tmp_path / "in.png"], spec, tmp_path / "a")
    build_transform_benchmark([tmp_path / "in.png"], spec, tmp_path / "b")
    for name in ("small/0000_ref.png", "small/0000_gt.npz", "benchmark_small.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    gt, valid = load_gt(tmp_path / "a" / "small/0000_gt.npz")
    assert gt.shape == (8, 8, 2) and valid.dtype == bool


def test_assemble_dataset(tmp_path):
    q, pool = tmp_path / "q", tmp_path / "pool"
    q.mkdir(), pool.mkdir()
    for n in ("a", "b", "c"):
        write_png(q / f"{n}.png", procedural_texture(n.encode()[0], (32, 32)))
    write_png(pool / "big.png", procedural_texture(9, (64, 64)))
    write_png(pool / "ok.png", procedural_texture(8, (32, 30)))
    (tmp_path / "sel.json").write_text(json.dumps({"a.png": "big.png", "b.png": "ok.png", "c.png": None}))
    manifest, report = assemble_refsr_dataset(q, pool, tmp_path / "sel.json", tmp_path / "out", RescalePolicy(0.1))
    assert report.kept == ["a.png", "b.png"] and report.dropped == ["c.png"] and report.rescaled == ["a.png"]
    assert read_png(tmp_path / "out/refs/a.png").shape == (32, 32, 3)
    assert manifest.missing_paths() == []
    (tmp_path / "sel.json").write_text(json.dumps({"zz.png": "nope.png"}))
    with pytest.raises(SelectionError) as err:
        assemble_refsr_dataset(q, pool, tmp_path / "sel.json", tmp_path / "out2")
    assert len(err.value.problems) == 2


def test_toy_clip_similarity_levels_are_ordered():
    clip = toy_clip(3)
    assert len(clip.hr) == 10 and clip.lr[0].shape == (32, 32, 3) and clip.hr[0].shape == (128, 128, 3)
    scores = {k: psnr(v, clip.hr[0]) for k, v in clip.refs.items()}
    assert scores["very_similar"] > scores["similar"]
    assert scores["very_similar"] > scores["irrelevant"]


def test_clip_io(tmp_path):
    clip = toy_clip(0, n_frames=3, lr_size=8)
    write_clip(clip.hr, tmp_path / "c")
    back = read_clip(tmp_path / "c")
    assert len(back) == 3 and back[0].shape == clip.hr[0].shape
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        read_clip(tmp_path / "empty")
