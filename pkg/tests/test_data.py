import os

import numpy as np
import pytest

from acenet.autodiff import AdamState, Tensor
from acenet.data import (DatasetManifest, LabeledSample, load_checkpoint, load_image,
                         load_manifest, load_sample, reflect_pad_sample, save_checkpoint,
                         save_image, save_manifest, save_sample, synth_membranes,
                         synth_vessels)
from acenet.errors import (CheckpointConfigError, CheckpointPayloadError,
                           CheckpointVersionError, DataError)
from acenet.graph import Network, NetworkConfig
from acenet.metrics import connected_components


# -------------------------------------------------------------- image io

def test_image_round_trip_is_exact_for_8bit_values(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.integers(0, 256, size=(5, 7)).astype(np.float64) / 255.0
    p = tmp_path / "g.png"
    save_image(arr, p)
    back = load_image(p)
    assert back.shape == (1, 1, 5, 7)
    np.testing.assert_array_equal(back.data, arr[None, None].astype(back.dtype))


def test_rgb_round_trip_and_channel_order(tmp_path):
    arr = np.zeros((3, 2, 2))
    arr[0, 0, 0] = 1.0  # pure red at (0,0)
    arr[1, 0, 1] = 1.0  # pure green at (0,1)
    arr[2, 1, 0] = 1.0  # pure blue at (1,0)
    p = tmp_path / "c.png"
    save_image(arr, p)
    back = load_image(p)
    assert back.shape == (1, 3, 2, 2)
    assert back.data[0, 0, 0, 0] == 1.0 and back.data[0, 1, 0, 1] == 1.0 \
        and back.data[0, 2, 1, 0] == 1.0


def test_undecodable_image_reports_path(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"this is not an image")
    with pytest.raises(DataError, match="junk.png"):
        load_image(p)


# ---------------------------------------------------------------- synth

def test_membranes_reproducible_and_well_formed():
    a = synth_membranes(5)
    b = synth_membranes(5)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.labels, b.labels)
    assert set(np.unique(a.labels)) <= {0, 1}
    assert a.image.data.min() >= 0.0 and a.image.data.max() <= 1.0
    assert a.fov is None


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_membranes_interiors_recover_cell_count(seed):
    n_cells = 8
    s = synth_membranes(seed, h=64, w=64, n_cells=n_cells)
    comps = connected_components(s.labels, connectivity=4)
    assert comps.max() == n_cells


def test_membranes_rejects_degenerate_cell_count():
    with pytest.raises(DataError, match="n_cells"):
        synth_membranes(0, n_cells=1)


def test_vessels_reproducible_fov_clipped():
    a = synth_vessels(9)
    b = synth_vessels(9)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.fov, b.fov)
    assert not np.any(a.labels[~a.fov])
    assert a.fov.dtype == bool


def test_vessels_foreground_fraction_within_band():
    # calibration contract for the default parameters
    fracs = [synth_vessels(seed).labels.mean() for seed in range(100)]
    assert min(fracs) >= 0.02
    assert max(fracs) <= 0.25


def test_vessels_rejects_zero_branches():
    with pytest.raises(DataError, match="branches"):
        synth_vessels(0, branches=0)


# ------------------------------------------------------------- manifests

def test_manifest_round_trip(tmp_path):
    entries = [save_sample(synth_membranes(i, h=16, w=16, n_cells=3), tmp_path, f"m{i}")
               for i in range(2)]
    m = DatasetManifest(split="train", channels=1, entries=entries, base_dir=str(tmp_path))
    mp = tmp_path / "manifest.json"
    save_manifest(m, mp)
    back = load_manifest(mp)
    assert back.split == "train" and back.channels == 1 and len(back.entries) == 2
    s = load_sample(back, 0)
    orig = synth_membranes(0, h=16, w=16, n_cells=3)
    assert np.array_equal(s.labels, orig.labels)
    assert s.fov is None
    # image survives up to 8-bit quantization
    assert np.max(np.abs(s.image.data - orig.image.data)) <= 0.5 / 255.0 + 1e-9


def test_manifest_round_trip_with_fov(tmp_path):
    e = save_sample(synth_vessels(0, h=16, w=16, branches=2), tmp_path, "v0")
    m = DatasetManifest(split="test", channels=1, entries=[e], base_dir=str(tmp_path))
    save_manifest(m, tmp_path / "mani.json")
    s = load_sample(load_manifest(tmp_path / "mani.json"), 0)
    orig = synth_vessels(0, h=16, w=16, branches=2)
    assert np.array_equal(s.fov, orig.fov)
    assert np.array_equal(s.labels, orig.labels)


def test_manifest_validation_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(DataError, match="JSON"):
        load_manifest(p)
    p.write_text('{"split": "weird", "channels": 1, "samples": []}')
    with pytest.raises(DataError, match="split"):
        load_manifest(p)
    p.write_text('{"split": "train", "channels": 2, "samples": []}')
    with pytest.raises(DataError, match="channels"):
        load_manifest(p)
    p.write_text('{"split": "train", "channels": 1}')
    with pytest.raises(DataError, match="samples"):
        load_manifest(p)


# --------------------------------------------------------------- padding

def test_reflect_pad_to_multiple():
    s = synth_membranes(0, h=10, w=13, n_cells=3)
    padded, ignore = reflect_pad_sample(s, 8)
    assert padded.image.shape == (1, 1, 16, 16)
    assert padded.labels.shape == (16, 16)
    assert ignore.shape == (16, 16)
    assert not ignore[:10, :13].any()
    assert ignore[10:, :].all() and ignore[:, 13:].all()
    # reflected content mirrors the interior rows/cols
    np.testing.assert_array_equal(padded.labels[10, :13], s.labels[8, :])


def test_reflect_pad_noop_when_divisible():
    s = synth_membranes(0, h=16, w=16, n_cells=3)
    padded, ignore = reflect_pad_sample(s, 8)
    assert padded is s
    assert not ignore.any()


# ------------------------------------------------------------ checkpoints

def small_net():
    return Network(NetworkConfig(depth=2, base_width=2), seed=4)


def trained_state(net):
    opt = AdamState(lr=1e-3)
    rng = np.random.default_rng(0)
    for p in net.parameter_list():
        p.grad = rng.normal(size=p.shape).astype(p.dtype)
    from acenet.autodiff import adam_step
    adam_step(net.parameter_list(), opt)
    for p in net.parameter_list():
        p.zero_grad()
    return opt


def test_checkpoint_round_trip_bitwise(tmp_path):
    net = small_net()
    opt = trained_state(net)
    p = tmp_path / "a.ckpt"
    save_checkpoint(net, opt, p, step=17)
    net2, opt2, step = load_checkpoint(p)
    assert step == 17
    assert net2.cfg == net.cfg
    for name in net.parameters:
        assert np.array_equal(net.parameters[name].data, net2.parameters[name].data)
        assert np.array_equal(opt.m[name], opt2.m[name])
        assert np.array_equal(opt.v[name], opt2.v[name])
    assert (opt2.lr, opt2.beta1, opt2.beta2, opt2.epsilon, opt2.t) == \
        (opt.lr, opt.beta1, opt.beta2, opt.epsilon, opt.t)


def test_checkpoint_forward_identical_after_reload(tmp_path):
    net = small_net()
    opt = trained_state(net)
    p = tmp_path / "b.ckpt"
    save_checkpoint(net, opt, p)
    net2, _, _ = load_checkpoint(p)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 8, 8)).astype(np.float32))
    a = net.forward(x).final_logits.data
    b = net2.forward(x).final_logits.data
    assert np.array_equal(a, b)


def test_checkpoint_no_temp_file_left(tmp_path):
    net = small_net()
    save_checkpoint(net, AdamState(), tmp_path / "c.ckpt")
    assert sorted(f.name for f in tmp_path.iterdir()) == ["c.ckpt"]


def test_checkpoint_version_mismatch(tmp_path):
    net = small_net()
    p = tmp_path / "d.ckpt"
    save_checkpoint(net, AdamState(), p)
    raw = bytearray(p.read_bytes())
    raw[8] = 99  # version field follows the 8-byte magic
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(p)


def test_checkpoint_config_mismatch(tmp_path):
    net = small_net()
    p = tmp_path / "e.ckpt"
    save_checkpoint(net, AdamState(), p)
    with pytest.raises(CheckpointConfigError, match="different network config"):
        load_checkpoint(p, expected_cfg=NetworkConfig(depth=3, base_width=2))


def test_checkpoint_truncated_payload(tmp_path):
    net = small_net()
    p = tmp_path / "f.ckpt"
    save_checkpoint(net, AdamState(), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:len(raw) - 50])
    with pytest.raises(CheckpointPayloadError, match="truncated"):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "g.ckpt"
    p.write_bytes(b"GARBAGEFILE" + b"\x00" * 64)
    with pytest.raises(CheckpointPayloadError, match="magic"):
        load_checkpoint(p)
