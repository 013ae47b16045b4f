import numpy as np
import pytest
import torch

from refsr.checkpoint import CheckpointError
from refsr.contrastive import Matcher, TrainingDivergedError
from refsr.data import procedural_texture, toy_clip
from refsr.descriptors import ConfigurationError, ContractViolation, EncoderConfig
from refsr.imageio import to_tensor
from refsr.video_sr import (AttentionFuse, FlowEstimator, RefVideoSR, VideoSample, VSRConfig, VSRTrainConfig,
                            charbonnier_loss, estimate_flow, flow_warp, lucas_kanade, restore_clip, train_vsr)

SMALL = VSRConfig(channels=8, extract_blocks=1, prop_blocks=1, fusion_blocks=1, flow_hidden=4)


def small_matcher():
    torch.manual_seed(0)
    return Matcher(EncoderConfig(channels=(4, 8, 8), descriptor_dim=8), "student")


def test_zero_flow_warp_is_identity():
    x = torch.rand(2, 3, 5, 7)
    assert torch.equal(flow_warp(x, torch.zeros(2, 5, 7, 2)), x)
    assert torch.equal(flow_warp(x, torch.zeros(2, 5, 7, 2), border=True), x)


def test_integer_flow_is_a_shift():
    x = torch.rand(1, 2, 6, 6)
    flow = torch.zeros(1, 6, 6, 2)
    flow[..., 0] = 2
    out = flow_warp(x, flow)
    assert torch.equal(out[..., :4], x[..., 2:])
    assert float(out[..., 4:].abs().max()) == 0.0
    clamped = flow_warp(x, flow, border=True)
    assert torch.equal(clamped[..., 5], x[..., 5])


def test_flow_warp_shape_check():
    with pytest.raises(ContractViolation):
        flow_warp(torch.rand(1, 1, 4, 4), torch.zeros(1, 4, 5, 2))


@pytest.mark.parametrize("shift", [(2, 0), (0, -3), (1, 1)])
def test_lucas_kanade_recovers_translation(shift):
    tex = procedural_texture(5, (96, 96), (6, 12, 24, 32))
    a = tex[16:80, 16:80]
    b = tex[16 - shift[1]:80 - shift[1], 16 - shift[0]:80 - shift[0]]
    flow = lucas_kanade(to_tensor(a, torch.float64), to_tensor(b, torch.float64))[0, 8:-8, 8:-8]
    np.testing.assert_allclose(flow.mean((0, 1)).numpy(), shift, atol=0.15)


def test_estimate_flow_warps_second_onto_first():
    tex = procedural_texture(6, (80, 80), (6, 12, 24, 32))
    a, b = tex[8:72, 8:72], tex[8:72, 6:70]
    est = FlowEstimator(4)
    flow = estimate_flow(a, b, est)
    assert flow.shape == (64, 64, 2)
    warped = flow_warp(to_tensor(b), torch.from_numpy(flow)[None].float())
    inner = (slice(8, -8), slice(8, -8))
    err = (warped[0].permute(1, 2, 0).numpy() - a)[inner]
    assert np.abs(err).mean() < 0.02
    with pytest.raises(ConfigurationError):
        estimate_flow(a, b, None)
    with pytest.raises(ContractViolation):
        estimate_flow(a, b[:32], est)


def test_attention_mask_starts_at_half_and_can_be_disabled():
    torch.manual_seed(0)
    on, off = AttentionFuse(4, 4), AttentionFuse(4, 4, enabled=False)
    f, b = torch.rand(1, 4, 3, 3), torch.rand(1, 4, 3, 3)
    assert torch.all(on.mask(f, b) == 0.5)
    assert torch.equal(off(f, b), b)
    torch.testing.assert_close(on(f, b), 0.5 * b)


def test_output_shape_and_causality():
    torch.manual_seed(0)
    net = RefVideoSR(SMALL, small_matcher()).eval()
    frames = torch.rand(4, 3, 8, 8)
    with torch.no_grad():
        feats = net.features(frames)
        fwd, bwd = net.flows(frames)
        hf = net.propagate(feats, fwd, "forward")
        hb = net.propagate(feats, bwd, "backward")
        frames2 = frames.clone()
        frames2[3] = torch.rand(3, 8, 8)
        feats2 = net.features(frames2)
        fwd2, bwd2 = net.flows(frames2)
        hf2 = net.propagate(feats2, fwd2, "forward")
        hb2 = net.propagate(feats2, bwd2, "backward")
    for i in range(3):
        assert torch.equal(hf[i], hf2[i])
    assert not torch.equal(hb[0], hb2[0])
    assert net(frames, torch.rand(1, 3, 32, 32)).shape == (4, 3, 32, 32)


def test_zeroed_reference_branch_equals_no_reference():
    torch.manual_seed(0)
    net = RefVideoSR(SMALL, small_matcher())
    torch.nn.init.normal_(net.att_ref.conv2.weight)
    net.zero_reference_branch().eval()
    frames, ref = torch.rand(3, 3, 8, 8), torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        assert torch.equal(net(frames, ref), net(frames, None))


def test_flow_alignment_variant():
    torch.manual_seed(0)
    cfg = VSRConfig(channels=8, extract_blocks=1, prop_blocks=1, fusion_blocks=1, flow_hidden=4, ref_align="flow")
    net = RefVideoSR(cfg)
    assert net(torch.rand(2, 3, 8, 8), torch.rand(1, 3, 32, 32)).shape == (2, 3, 32, 32)
    with pytest.raises(ContractViolation):
        net(torch.rand(2, 3, 8, 8), torch.rand(1, 3, 16, 16))
    with pytest.raises(ConfigurationError):
        VSRConfig(ref_align="guess")


def test_single_frame_and_missing_matcher():
    torch.manual_seed(0)
    net = RefVideoSR(SMALL)
    assert net(torch.rand(1, 3, 8, 8)).shape == (1, 3, 32, 32)
    with pytest.raises(ConfigurationError):
        net(torch.rand(2, 3, 8, 8), torch.rand(1, 3, 32, 32))


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    net = RefVideoSR(SMALL, small_matcher()).eval()
    net.save(tmp_path / "v.rsrw")
    back = RefVideoSR.load(tmp_path / "v.rsrw").eval()
    x, r = torch.rand(2, 3, 8, 8), torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        torch.testing.assert_close(net(x, r), back(x, r))
    small_matcher().save(tmp_path / "m.rsrw")
    with pytest.raises(CheckpointError):
        RefVideoSR.load(tmp_path / "m.rsrw")


def test_charbonnier():
    a = torch.zeros(2, 3)
    assert float(charbonnier_loss(a, a)) == pytest.approx(1e-8)
    assert float(charbonnier_loss(a, torch.full((2, 3), 3.0))) == pytest.approx(3.0)
    with pytest.raises(ContractViolation):
        charbonnier_loss(a, torch.zeros(3, 2))


def test_restore_clip():
    clip = toy_clip(0, n_frames=3, lr_size=8)
    torch.manual_seed(0)
    out = restore_clip(clip.lr, clip.refs["similar"], RefVideoSR(SMALL, small_matcher()))
    assert len(out) == 3 and out[0].shape == (32, 32, 3)
    with pytest.raises(ValueError):
        restore_clip([], None, RefVideoSR(SMALL))


def test_training_freezes_flow_then_releases_it():
    clip = toy_clip(1, n_frames=3, lr_size=8)
    sample = VideoSample(clip.lr, clip.hr, clip.refs["very_similar"])
    cfg = VSRTrainConfig(iterations=4, flow_frozen_iters=2, patch_size=6)
    model, hist = train_vsr([sample], small_matcher(), cfg, SMALL)
    assert [h["flow_frozen"] for h in hist] == [True, True, False, False]
    _, hist2 = train_vsr([sample], small_matcher(), cfg, SMALL)
    assert [h["loss"] for h in hist] == [h["loss"] for h in hist2]
    with pytest.raises(ConfigurationError):
        train_vsr([sample], None, cfg, SMALL)
    with pytest.raises(ConfigurationError):
        VSRTrainConfig.from_dict({"lr": 1})


def test_training_divergence(monkeypatch):
    import refsr.video_sr as mod
    clip = toy_clip(1, n_frames=2, lr_size=8)
    monkeypatch.setattr(mod, "charbonnier_loss", lambda a, b: (a - b).abs().mean() * float("nan"))
    with pytest.raises(TrainingDivergedError):
        train_vsr([VideoSample(clip.lr, clip.hr)], None, VSRTrainConfig(iterations=1), SMALL)



@pytest.mark.parametrize("crop_ref", [False, True])
def test_patch_crop_keeps_lr_hr_ref_aligned(crop_ref):
    from refsr.video_sr import _random_patch
    lr = torch.rand(3, 3, 12, 10)
    hr = torch.rand(3, 3, 48, 40)
    ref = torch.rand(1, 3, 48, 40)
    p0 = torch.zeros(3, 12, 10, 2)
    lr_c, hr_c, ref_c, p0_c = _random_patch((lr, hr, ref, p0), 4, np.random.default_rng(3), crop_ref=crop_ref)
    # the displacement shift reveals the window origin
    x, y = int(p0_c[0, 0, 0, 0]), int(p0_c[0, 0, 0, 1])
    assert torch.equal(lr_c, lr[..., y:y + 4, x:x + 4])
    assert torch.equal(hr_c, hr[..., 4 * y:4 * y + 16, 4 * x:4 * x + 16])
    if crop_ref:
        assert torch.equal(ref_c, ref[..., 4 * y:4 * y + 16, 4 * x:4 * x + 16])
    else:
        assert ref_c is ref
