import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from refsr.blocks import ChannelError, Upsample2x, depth_to_space, space_to_depth
from refsr.checkpoint import Checkpoint, CheckpointError, load_optimizer_state, optimizer_tensors
from refsr.imageio import ImageShapeError, check_image, crop_to_multiple, quantize, read_png, to_image, to_tensor, write_png


def test_png_round_trip_is_exact_on_8bit_values(tmp_path, rng):
    img = rng.integers(0, 256, size=(7, 9, 3)).astype(np.float32) / 255
    write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(read_png(tmp_path / "a.png"), img)


def test_quantize_rounds_half_up():
    np.testing.assert_array_equal(quantize(np.array([0.5 / 255, 1.49 / 255, 2.0])), [1, 1, 255])


def test_check_image_rejects_bad_input():
    with pytest.raises(ImageShapeError):
        check_image(np.zeros((3, 3, 2)))
    with pytest.raises(ImageShapeError):
        check_image(np.full((3, 3, 3), np.nan))
    assert check_image(np.zeros((3, 3))).shape == (3, 3, 1)


def test_tensor_conversion_round_trip(rng):
    img = rng.random((5, 6, 3)).astype(np.float32)
    assert to_tensor(img).shape == (1, 3, 5, 6)
    np.testing.assert_array_equal(to_image(to_tensor(img)), img)
    assert crop_to_multiple(img, 4).shape == (4, 4, 3)


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 3]))
def test_depth_to_space_is_a_bijection(c, h, w, f):
    x = torch.arange(c * f * f * h * w, dtype=torch.float64).reshape(1, c * f * f, h, w)
    y = depth_to_space(x, f)
    assert y.shape == (1, c, h * f, w * f)
    assert torch.equal(space_to_depth(y, f), x)
    assert sorted(y.flatten().tolist()) == sorted(x.flatten().tolist())


def test_depth_to_space_layout():
    x = torch.arange(4.0).reshape(1, 4, 1, 1)
    assert depth_to_space(x).flatten().tolist() == [0, 1, 2, 3]
    with pytest.raises(ChannelError):
        depth_to_space(torch.zeros(1, 3, 2, 2))
    with pytest.raises(ChannelError):
        space_to_depth(torch.zeros(1, 1, 3, 2))
    assert Upsample2x(4, 2)(torch.rand(1, 4, 3, 3)).shape == (1, 2, 6, 6)


def test_checkpoint_bytes_are_deterministic_and_round_trip():
    t = {"b": torch.arange(6).reshape(2, 3), "a": torch.rand(3, 2)}
    ck = Checkpoint("test-v1", t, {"x": 1, "y": [1, 2]})
    data = ck.to_bytes()
    assert data == Checkpoint("test-v1", dict(reversed(list(t.items()))), {"y": [1, 2], "x": 1}).to_bytes()
    back = Checkpoint.from_bytes(data)
    assert back.architecture_id == "test-v1" and back.meta == {"x": 1, "y": [1, 2]}
    assert torch.equal(back.tensors["a"], t["a"]) and torch.equal(back.tensors["b"], t["b"])
    assert back.subset("a") == {"": back.tensors["a"]}


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"NOPE" + bytes(12))
    bad = bytearray(Checkpoint("x", {}).to_bytes())
    bad[4] = 9
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(bad))
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "missing.rsrw")


def test_optimizer_state_round_trip():
    lin = torch.nn.Linear(3, 2)
    opt = torch.optim.Adam(lin.parameters(), lr=1e-2)
    lin(torch.rand(4, 3)).sum().backward()
    opt.step()
    tensors, meta = optimizer_tensors(opt)
    ck = Checkpoint.from_bytes(Checkpoint("x", tensors, {"optimizer": meta}).to_bytes())
    opt2 = torch.optim.Adam(lin.parameters(), lr=1e-2)
    load_optimizer_state(opt2, ck)
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for k in s1:
        torch.testing.assert_close(s1[k]["exp_avg"], s2[k]["exp_avg"])
