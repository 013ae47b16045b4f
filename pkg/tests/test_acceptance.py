"""Acceptance criteria 1-10; each test prints one PASS/FAIL line.

Criteria 5-8 share trained models built once per session (roughly half an hour
on one CPU core in total).
"""
import math
import time

import numpy as np
import pytest
import torch

from refsr.aggregation import OffsetField, aggregate
from refsr.blocks import depth_to_space, space_to_depth
from refsr.contrastive import (ContrastiveLossConfig, FixedFeatureMatcher, correlation_kl_loss, soft_volume,
                               train_student, train_teacher, triplet_margin_loss)
from refsr.data import TransformBenchmarkSpec, benchmark_pair, procedural_texture, synthetic_pairs, toy_clip
from refsr.descriptors import DescriptorGrid, correlation_volume, match
from refsr.homography import Homography, sample_homography
from refsr.image_sr import SRModelConfig, SRSample, SRTrainConfig, perceptual_loss, restore, train_sr
from refsr.imageio import to_tensor
from refsr.metrics import aee, psnr, ssim
from refsr.resize import bicubic_downsample
from refsr.video_sr import RefVideoSR, VideoSample, VSRConfig, VSRTrainConfig, charbonnier_loss, flow_warp
from refsr.video_sr import restore_clip, train_vsr

from cli_pipeline import artifact_hashes, run_pipeline


@pytest.fixture
def record(request, capsys):
    def _record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return _record


# ---------------------------------------------------------------------------
# 1. matching oracles


def _loop_match(a, b):
    out = np.zeros(a.shape[:2] + (2,), dtype=np.int64)
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            best, arg = -np.inf, None
            na = np.linalg.norm(a[y, x])
            for yy in range(b.shape[0]):
                for xx in range(b.shape[1]):
                    nb = np.linalg.norm(b[yy, xx])
                    s = 0.0 if na == 0 or nb == 0 else float(a[y, x] @ b[yy, xx]) / (na * nb)
                    if s > best:
                        best, arg = s, (xx, yy)
            out[y, x] = arg
    return out


def _loop_volume(a, b, tau):
    fa, fb = a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1])
    vol = np.zeros((len(fa), len(fb)))
    for i, u in enumerate(fa):
        logits = np.array([u @ v / (np.linalg.norm(u) * np.linalg.norm(v)) / tau for v in fb])
        e = np.exp(logits - logits.max())
        vol[i] = e / e.sum()
    return vol


def test_criterion_1_matching_oracles(record):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst, index_ok = 0.0, True
    for _ in range(200):
        h, w, rh, rw = (int(v) for v in rng.integers(1, 9, size=4))
        d = int(rng.integers(1, 17))
        a, b = rng.standard_normal((h, w, d)), rng.standard_normal((rh, rw, d))
        ga, gb = DescriptorGrid(torch.tensor(a)), DescriptorGrid(torch.tensor(b))
        index_ok &= bool(np.array_equal(match(ga, gb).targets, _loop_match(a, b)))
        worst = max(worst, float(np.abs(correlation_volume(ga, gb, 0.15).data.numpy() - _loop_volume(a, b, 0.15)).max()))
    elapsed = time.perf_counter() - start
    ok = index_ok and worst <= 1e-6 and elapsed < 60
    record(1, ok, f"indices equal={index_ok}, volume max diff={worst:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient checks


def _fd_check(fn, x, eps=1e-5, kink_tol=1e-4):
    """Relative error between autograd and central differences, or ``None`` near a kink.

    A coordinate sits near a kink when its forward and backward one-sided
    differences disagree; such instances are skipped.
    """
    x = x.detach().clone().requires_grad_(True)
    f0 = fn(x)
    (g,) = torch.autograd.grad(f0, x)
    f0 = float(f0.detach())
    flat = x.detach().reshape(-1)
    num = torch.zeros_like(flat)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += eps
        xm[i] -= eps
        with torch.no_grad():
            fp, fm = float(fn(xp.reshape(x.shape))), float(fn(xm.reshape(x.shape)))
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            return None
        num[i] = (fp - fm) / (2 * eps)
    g = g.reshape(-1)
    scale = max(float(g.norm()), float(num.norm()), 1e-12)
    return float((g - num).norm()) / scale


def _check_many(make, n=20, max_tries=200):
    errs, tries = [], 0
    while len(errs) < n and tries < max_tries:
        tries += 1
        err = _fd_check(*make(tries))
        if err is not None:
            errs.append(err)
    return errs


def _margin_case(seed):
    r = np.random.default_rng(seed)
    a = torch.tensor(r.standard_normal((3, 4, 3)))
    b = torch.tensor(r.standard_normal((4, 4, 3)))
    gt = torch.tensor(r.uniform(0, 3.4, size=(3, 4, 2)))
    valid = torch.ones(3, 4, dtype=torch.bool)

    def fn(x):
        return triplet_margin_loss(x[:36].reshape(3, 4, 3), x[36:].reshape(4, 4, 3), gt, valid, 1.0, 1)
    return fn, torch.cat([a.reshape(-1), b.reshape(-1)])


def _kl_case(seed):
    r = np.random.default_rng(seed)
    ta, tb = torch.tensor(r.standard_normal((2, 3, 4))), torch.tensor(r.standard_normal((3, 2, 4)))
    b = torch.tensor(r.standard_normal((3, 2, 4)))
    teacher = soft_volume(ta, tb, 0.15)

    def fn(x):
        return correlation_kl_loss(teacher, soft_volume(x.reshape(2, 3, 4), b, 0.15))
    return fn, torch.tensor(r.standard_normal(24))


def _charbonnier_case(seed):
    r = np.random.default_rng(seed)
    gt = torch.tensor(r.random((2, 3, 3)))

    def fn(x):
        return charbonnier_loss(x, gt, eps=1e-3)
    return fn, torch.tensor(r.random((2, 3, 3)))


def _perceptual_case(seed):
    r = np.random.default_rng(seed)
    hr = torch.tensor(r.random((1, 3, 3, 3)))
    return (lambda x: perceptual_loss(x, hr, lambda t: t)), torch.tensor(r.random((1, 3, 3, 3)))


def _aggregation_case(seed):
    r = np.random.default_rng(seed)
    ref = torch.tensor(r.standard_normal((1, 2, 5, 5)))
    p0 = torch.tensor(r.uniform(-1, 1, size=(1, 2, 2, 2)))
    weight = torch.tensor(r.standard_normal((2, 2, 9)))
    n_off, n_mod = 2 * 2 * 9 * 2, 2 * 2 * 9

    def fn(x):
        off = x[:n_off].reshape(1, 2, 2, 9, 2)
        mod = x[n_off:n_off + n_mod].reshape(1, 2, 2, 9)
        feat = x[n_off + n_mod:].reshape(1, 2, 5, 5)
        return (aggregate(feat, p0, OffsetField(off, mod), weight) ** 2).sum()
    x = torch.cat([torch.tensor(r.uniform(-0.9, 0.9, n_off)), torch.tensor(r.uniform(0, 1, n_mod)),
                   ref.reshape(-1)])
    return fn, x


def test_criterion_2_gradient_checks(record):
    start = time.perf_counter()
    cases = {"margin": _margin_case, "kl": _kl_case, "charbonnier": _charbonnier_case,
             "perceptual": _perceptual_case, "aggregation": _aggregation_case}
    worst = {}
    counts = {}
    for name, make in cases.items():
        errs = _check_many(make)
        counts[name] = len(errs)
        worst[name] = max(errs) if errs else math.inf
    elapsed = time.perf_counter() - start
    ok = all(c >= 20 for c in counts.values()) and all(e <= 1e-3 for e in worst.values()) and elapsed < 300
    detail = ", ".join(f"{k} {counts[k]} cases max rel {worst[k]:.1e}" for k in cases)
    record(2, ok, f"{detail}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. invariances


def test_criterion_3_invariances(record):
    rng = np.random.default_rng(3)
    checks = {}

    a, b = rng.standard_normal((4, 5, 6)), rng.standard_normal((3, 3, 6))
    base = match(DescriptorGrid(torch.tensor(a)), DescriptorGrid(torch.tensor(b))).targets
    checks["argmax scale"] = all(
        np.array_equal(base, match(DescriptorGrid(torch.tensor(a * k)), DescriptorGrid(torch.tensor(b * j))).targets)
        for k, j in ((0.01, 3.0), (7.5, 0.2), (1e3, 1e-3)))

    vol = correlation_volume(DescriptorGrid(torch.tensor(a)), DescriptorGrid(torch.tensor(b)), 0.05).data
    checks["row stochastic"] = float((vol.sum(-1) - 1).abs().max()) <= 1e-6

    feat = torch.rand(2, 3, 6, 7)
    checks["zero-flow warp"] = torch.equal(flow_warp(feat, torch.zeros(2, 6, 7, 2)), feat)

    x = torch.rand(1, 12, 3, 5)
    checks["depth-to-space"] = torch.equal(space_to_depth(depth_to_space(x, 2), 2), x)

    torch.manual_seed(0)
    from refsr.contrastive import Matcher
    from refsr.descriptors import EncoderConfig
    cfg = VSRConfig(channels=8, extract_blocks=1, prop_blocks=1, fusion_blocks=1, flow_hidden=4)
    net = RefVideoSR(cfg, Matcher(EncoderConfig(channels=(4, 8, 8), descriptor_dim=8)))
    torch.nn.init.normal_(net.att_ref.conv2.weight)
    net.zero_reference_branch().eval()
    frames, ref = torch.rand(3, 3, 8, 8), torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        checks["zeroed reference"] = torch.equal(net(frames, ref), net(frames, None))
        feats = net.features(frames)
        fwd, bwd = net.flows(frames)
        hf = net.propagate(feats, fwd, "forward")
        hb = net.propagate(feats, bwd, "backward")
        changed = frames.clone()
        changed[1] = torch.rand(3, 8, 8)
        feats2 = net.features(changed)
        fwd2, bwd2 = net.flows(changed)
        hf2 = net.propagate(feats2, fwd2, "forward")
        hb2 = net.propagate(feats2, bwd2, "backward")
    checks["causality"] = torch.equal(hf[0], hf2[0]) and torch.equal(hb[2], hb2[2]) and not torch.equal(hf[2], hf2[2])

    ok = all(checks.values())
    record(3, ok, ", ".join(f"{k}={'ok' if v else 'BROKEN'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. homography geometry


def test_criterion_4_homography_geometry(record):
    rng = np.random.default_rng(4)
    corner_err, trip_err = 0.0, 0.0
    for i in range(50):
        src = np.array([[0, 0], [159, 0], [159, 159], [0, 159]], float) + rng.uniform(-5, 5, (4, 2))
        dst = sample_homography(i).apply(src)
        h = Homography.from_points(src, dst)
        corner_err = max(corner_err, float(np.abs(h.apply(src) - dst).max()))
        pts = rng.uniform(0, 160, size=(1000, 2))
        trip_err = max(trip_err, float(np.abs(h.inverse().apply(h.apply(pts)) - pts).max()))
    ok = corner_err <= 1e-8 and trip_err <= 1e-6
    record(4, ok, f"defining points max err {corner_err:.1e}, round trip max err {trip_err:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5 and 6. matcher learning and distillation

MATCHER_CFG = dict(encoder_channels=(16, 32, 64), descriptor_dim=64, learning_rate=1e-4, steps=600, batch_size=8,
                   seed=0)
TEACHER_STEPS = 1800  # the teacher has to converge before it is worth imitating
N_TRAIN, TRAIN_CROP = 512, 96
N_HELD_OUT, HELD_OUT_SIZE = 24, 96


@pytest.fixture(scope="session")
def matchers():
    pairs = synthetic_pairs(N_TRAIN, seed=0, crop=TRAIN_CROP)
    cfg = ContrastiveLossConfig(**MATCHER_CFG, kl_weight=15.0)
    teacher = train_teacher(pairs, ContrastiveLossConfig(**{**MATCHER_CFG, "steps": TEACHER_STEPS})).matcher
    student = train_student(pairs, teacher, cfg).matcher
    ablation = train_student(pairs, teacher, ContrastiveLossConfig(**MATCHER_CFG, kl_weight=0.0)).matcher
    return {"teacher": teacher, "student": student, "no_kl": ablation, "cfg": cfg}


def _held_out_aee(matcher, group):
    spec = TransformBenchmarkSpec.for_group(group, seed=11)
    errs = []
    for i in range(N_HELD_OUT):
        hr = procedural_texture((9001, i), (HELD_OUT_SIZE, HELD_OUT_SIZE))
        ref, _, gt, valid, _, _ = benchmark_pair(hr, spec, i)
        field = matcher.correspond(to_tensor(bicubic_downsample(hr, 4)), to_tensor(ref))
        errs.append(aee(field, gt, valid))
    return float(np.mean(errs))


@pytest.mark.slow
def test_criterion_5_matcher_learning(record, matchers):
    student = {g: _held_out_aee(matchers["student"], g) for g in ("small", "medium", "large")}
    fixed_small = _held_out_aee(FixedFeatureMatcher(), "small")
    ordered = student["small"] < student["medium"] < student["large"]
    beats = student["small"] < fixed_small
    ok = ordered and beats
    record(5, ok, "AEE small/medium/large = " + "/".join(f"{student[g]:.3f}" for g in student)
           + f", fixed-feature small = {fixed_small:.3f}")
    assert ok


def _held_out_kl(student, teacher, temperature):
    pairs = synthetic_pairs(N_HELD_OUT, seed=77, crop=TRAIN_CROP)
    kls = []
    with torch.no_grad():
        for p in pairs:
            ta = teacher.encode_input(to_tensor(p.hr_input))[0].permute(1, 2, 0)
            tb = teacher.encode_ref(to_tensor(p.hr_ref))[0].permute(1, 2, 0)
            sa = student.encode_input(to_tensor(p.lr_input))[0].permute(1, 2, 0)
            sb = student.encode_ref(to_tensor(p.hr_ref))[0].permute(1, 2, 0)
            kls.append(float(correlation_kl_loss(soft_volume(ta, tb, temperature), soft_volume(sa, sb, temperature))))
    return float(np.mean(kls))


@pytest.mark.slow
def test_criterion_6_distillation(record, matchers):
    tau = matchers["cfg"].temperature
    kl_on = _held_out_kl(matchers["student"], matchers["teacher"], tau)
    kl_off = _held_out_kl(matchers["no_kl"], matchers["teacher"], tau)
    groups = ("small", "medium", "large")
    aee_on = np.mean([_held_out_aee(matchers["student"], g) for g in groups])
    aee_off = np.mean([_held_out_aee(matchers["no_kl"], g) for g in groups])
    ok = kl_on < kl_off and aee_on <= 1.05 * aee_off
    record(6, ok, f"held-out KL {kl_on:.4f} (distilled) vs {kl_off:.4f} (no KL); "
                  f"AEE {aee_on:.3f} vs {aee_off:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 7. image SR overfit

SR_MODEL = SRModelConfig(channels=16, trunk_blocks=4, transfer_blocks=(2, 2, 2), ref_channels=(16, 16, 16))
SR_ITERS = 1500


@pytest.mark.slow
def test_criterion_7_image_sr_overfit(record, matchers):
    pairs = synthetic_pairs(8, seed=21, crop=48)
    samples = [SRSample(p.lr_input, p.hr_ref, p.hr_input) for p in pairs]
    cfg = SRTrainConfig.rec_only(iterations=SR_ITERS, batch_size=8, learning_rate=1e-3)
    model, _, _ = train_sr(samples, matchers["student"], cfg, SR_MODEL)
    scores = [psnr(restore(s.lr, s.ref, model), s.hr) for s in samples]
    ok = min(scores) >= 35.0
    record(7, ok, f"{SR_ITERS} iterations, per-pair PSNR min {min(scores):.2f} dB, mean {np.mean(scores):.2f} dB")
    assert ok


# ---------------------------------------------------------------------------
# 8. video SR overfit

VSR_MODEL = VSRConfig(channels=16, extract_blocks=1, prop_blocks=2, fusion_blocks=2)
VSR_ITERS = 1000


@pytest.mark.slow
def test_criterion_8_video_sr_overfit(record, matchers):
    clips = [toy_clip(s) for s in (1, 2)]
    samples = [VideoSample(c.lr, c.hr, c.refs["very_similar"]) for c in clips]
    cfg = VSRTrainConfig(learning_rate=1e-3, iterations=VSR_ITERS, flow_frozen_iters=VSR_ITERS, patch_size=16)
    model, _ = train_vsr(samples, matchers["student"], cfg, VSR_MODEL)
    train_scores = [psnr(o, h) for s in samples for o, h in zip(restore_clip(s.lr, s.ref, model), s.hr)]
    held = toy_clip(3)
    by_ref = {k: float(np.mean([psnr(o, h) for o, h in zip(restore_clip(held.lr, held.refs[k], model), held.hr)]))
              for k in ("very_similar", "similar", "irrelevant")}
    fit = min(train_scores) >= 32.0
    mono = by_ref["very_similar"] >= by_ref["similar"] >= by_ref["irrelevant"] - 0.05
    ok = fit and mono
    record(8, ok, f"training frames PSNR min {min(train_scores):.2f} dB; held-out PSNR very similar/similar/"
                  f"irrelevant = {by_ref['very_similar']:.3f}/{by_ref['similar']:.3f}/{by_ref['irrelevant']:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. metric conformance


def test_criterion_9_metric_conformance(record, tmp_path):
    from refsr.data import build_transform_benchmark
    from refsr.evaluate import evaluate, strip_volatile
    from refsr.imageio import write_png

    worst = 0.0
    base = np.full((16, 16, 3), 10, np.uint8)
    for k in range(1, 200):
        for mode in ("Y", "RGB"):
            worst = max(worst, abs(psnr(base, base + np.uint8(k), mode) - 20 * math.log10(255 / k)))
    img = np.random.default_rng(9).random((20, 20, 3))
    same = ssim(img, img) == 1.0 and ssim(img, img, "RGB") == 1.0
    gt = np.zeros((3, 3, 2))
    off = gt + [3.0, 4.0]
    aee_ok = aee(gt, gt) == 0.0 and aee(off, gt) == 5.0 and aee(off, gt, np.eye(3, dtype=bool)) == 5.0

    write_png(tmp_path / "in.png", procedural_texture(0, (32, 32)))
    build_transform_benchmark([tmp_path / "in.png"], TransformBenchmarkSpec.for_group("medium"), tmp_path / "b")
    texts = []
    for name in ("r1.json", "r2.json"):
        evaluate("bicubic", tmp_path / "b/benchmark_medium.jsonl").save(tmp_path / name)
        texts.append((tmp_path / name).read_text())
    stable = strip_volatile(texts[0]) == strip_volatile(texts[1])
    ok = worst <= 1e-9 and same and aee_ok and stable
    record(9, ok, f"constant-offset PSNR max err {worst:.1e} dB, ssim(a,a)=1 {same}, aee exact {aee_ok}, "
                  f"report stable {stable}")
    assert ok


# ---------------------------------------------------------------------------
# 10. CLI determinism


def test_criterion_10_cli_determinism(record, tmp_path):
    codes_a = run_pipeline(tmp_path / "a")
    codes_b = run_pipeline(tmp_path / "b")
    ha, hb = artifact_hashes(tmp_path / "a"), artifact_hashes(tmp_path / "b")
    differing = sorted(k for k in ha.keys() | hb.keys() if ha.get(k) != hb.get(k))
    ok = codes_a == codes_b == [0] * len(codes_a) and not differing
    record(10, ok, f"{len(ha)} artifacts compared, {len(differing)} differ"
                   + (f" ({', '.join(differing[:3])})" if differing else ""))
    assert ok
