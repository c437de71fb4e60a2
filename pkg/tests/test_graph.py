import numpy as np
import pytest

from acenet.autodiff import Tape, Tensor, grad_check, ops, precision
from acenet.autodiff.tensor import record_op
from acenet.errors import ConfigError, ShapeError
from acenet.graph import Network, NetworkConfig, build_network, describe

GOLDEN_DESCRIBE = """\
network: depth 4, base width 16, classes 2, input channels 1
icm blocks: 1, 2, 3, 4 (aspp rates 1, 2, 4)
raw image into msa: 1, 2
dense connections: on
side heads: 8

block       output shape          params  notes
acb1        1x16x64x64             13442  icm; side head
acb2        1x32x32x32             57314  icm; side head
acb3        1x64x16x16            228290  icm; side head
acb4        1x128x8x8             911234  icm; side head
bottleneck  1x256x4x4             885248
aeb1        1x128x8x8             721794  msa[up, skip:acb4, raw]; side head
aeb2        1x64x16x16            180674  msa[up, skip:acb3, raw]; side head
aeb3        1x32x32x32             49346  msa[up, skip:acb2, dense:aeb1]; side head
aeb4        1x16x64x64             16754  msa[up, skip:acb1, dense:aeb1+aeb2]; side head
head        1x2x64x64                 34

total parameters: 3064130"""


def small_cfg(**kw):
    base = dict(depth=2, base_width=2, in_channels=1)
    base.update(kw)
    return NetworkConfig(**base)


def image(rng, cfg, size=8, batch=1):
    return Tensor(rng.normal(size=(batch, cfg.in_channels, size, size)).astype(np.float32))


def _sumsq(tensors):
    total = float(sum((t.data.astype(np.float64) ** 2).sum() for t in tensors))
    out = Tensor(np.asarray(total, dtype=tensors[0].dtype), requires_grad=True,
                 dtype=tensors[0].dtype)

    def backward(gy):
        for t in tensors:
            t.accumulate_grad(2.0 * t.data * gy)

    return record_op(out, backward)


# ------------------------------------------------------------- config

def test_config_defaults_follow_depth():
    assert NetworkConfig().icm_enabled == (1, 2, 3, 4)
    assert NetworkConfig().msa_raw_image == (1, 2)
    assert NetworkConfig(depth=2).icm_enabled == (1, 2)
    assert NetworkConfig(depth=1).msa_raw_image == (1,)


def test_config_error_lists_every_violation():
    cfg = NetworkConfig(depth=0, num_classes=1, aspp_rates=(), icm_enabled=(9,))
    msgs = cfg.problems()
    assert len(msgs) >= 4
    with pytest.raises(ConfigError) as e:
        Network(cfg)
    for frag in ("depth", "num_classes", "aspp_rates", "icm_enabled"):
        assert frag in str(e.value)


def test_dense_sources_skip_direct_ancestor():
    cfg = NetworkConfig(depth=4)
    assert cfg.dense_sources(1) == ()
    assert cfg.dense_sources(2) == ()
    assert cfg.dense_sources(3) == (1,)
    assert cfg.dense_sources(4) == (1, 2)
    assert NetworkConfig(depth=4, dense_connections=False).dense_sources(4) == ()


# -------------------------------------------------------------- build

def test_same_seed_builds_identical_parameters():
    a = build_network(small_cfg(), seed=7)
    b = build_network(small_cfg(), seed=7)
    assert list(a.parameters) == list(b.parameters)
    for name in a.parameters:
        assert np.array_equal(a.parameters[name].data, b.parameters[name].data)


def test_different_seed_builds_different_weights():
    a = build_network(small_cfg(), seed=1)
    b = build_network(small_cfg(), seed=2)
    assert not np.array_equal(a.parameters["acb1/conv1/weight"].data,
                              b.parameters["acb1/conv1/weight"].data)


def test_biases_start_at_zero():
    net = build_network(small_cfg(), seed=0)
    for name, p in net.parameters.items():
        if name.endswith("/bias"):
            assert np.all(p.data == 0.0)


def test_parameter_count_grows_with_each_feature():
    base = dict(depth=3, base_width=2)
    plain = Network(NetworkConfig(icm_enabled=(), msa_raw_image=(),
                                  dense_connections=False, **base)).parameter_count()
    with_icm = Network(NetworkConfig(icm_enabled=(1, 2, 3), msa_raw_image=(),
                                     dense_connections=False, **base)).parameter_count()
    with_raw = Network(NetworkConfig(icm_enabled=(), msa_raw_image=(1, 2),
                                     dense_connections=False, **base)).parameter_count()
    with_dense = Network(NetworkConfig(icm_enabled=(), msa_raw_image=(),
                                       dense_connections=True, **base)).parameter_count()
    assert with_icm > plain
    assert with_raw > plain
    assert with_dense > plain


def test_parameter_count_monotone_in_icm_set():
    counts = []
    for upto in range(5):
        cfg = NetworkConfig(depth=4, base_width=2, icm_enabled=tuple(range(1, upto + 1)))
        counts.append(Network(cfg).parameter_count())
    assert counts == sorted(counts) and len(set(counts)) == 5


# ------------------------------------------------------------ forward

def test_forward_shapes_default_sized():
    cfg = NetworkConfig(base_width=4)
    net = Network(cfg, seed=0)
    out = net.forward(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))
    assert out.final_logits.shape == (1, 2, 64, 64)
    assert len(out.side_logits) == 8
    for s in out.side_logits:
        assert s.shape == (1, 2, 64, 64)
    assert out.block_tensors.bottleneck_out.shape == (1, 64, 4, 4)


@pytest.mark.parametrize("depth,width,size", [(1, 3, 6), (2, 2, 8), (3, 2, 16), (4, 2, 16)])
def test_shape_closure_over_config_grid(depth, width, size):
    rng = np.random.default_rng(depth * 10 + width)
    cfg = NetworkConfig(depth=depth, base_width=width, in_channels=1)
    net = Network(cfg, seed=0)
    out = net.forward(image(rng, cfg, size=size))
    assert out.final_logits.shape == (1, 2, size, size)
    assert len(out.side_logits) == 2 * depth
    for k, t in enumerate(out.block_tensors.acbs, start=1):
        scale = 2 ** (k - 1)
        assert t.icm_skip.shape == (1, cfg.level_width(k), size // scale, size // scale)
        assert t.conv2_out.shape == t.icm_skip.shape
        assert t.side_logits.shape[1] == cfg.num_classes
    for i, t in enumerate(out.block_tensors.aebs, start=1):
        scale = 2 ** (depth - i)
        assert t.block_out.shape == (1, cfg.aeb_width(i), size // scale, size // scale)
        assert t.side_logits.shape[1] == cfg.num_classes


def test_channel_bookkeeping_of_msa_concat():
    # width entering each expansive block's 3x3 = level width * (2 + raw + dense)
    for cfg in (NetworkConfig(depth=4, base_width=2),
                NetworkConfig(depth=4, base_width=2, msa_raw_image=(1, 2, 3, 4)),
                NetworkConfig(depth=4, base_width=2, dense_connections=False),
                NetworkConfig(depth=3, base_width=4, msa_raw_image=())):
        net = Network(cfg, seed=0)
        for i in range(1, cfg.depth + 1):
            w = cfg.aeb_width(i)
            expect = w * (2 + (1 if i in cfg.msa_raw_image else 0) + len(cfg.dense_sources(i)))
            assert net.parameters[f"aeb{i}/conv1/weight"].shape[1] == expect


def test_forward_is_deterministic_bitwise():
    rng = np.random.default_rng(3)
    cfg = small_cfg()
    net = Network(cfg, seed=0)
    x = image(rng, cfg)
    a = net.forward(x)
    b = net.forward(x)
    assert np.array_equal(a.final_logits.data, b.final_logits.data)
    for s, t in zip(a.side_logits, b.side_logits):
        assert np.array_equal(s.data, t.data)


def test_forward_rejects_bad_inputs():
    net = Network(small_cfg(), seed=0)
    with pytest.raises(ShapeError, match="channels"):
        net.forward(Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32)))
    with pytest.raises(ShapeError, match="reflect-pad"):
        net.forward(Tensor(np.zeros((1, 1, 10, 10), dtype=np.float32)))


def test_deep_supervision_off_removes_side_heads():
    cfg = small_cfg(deep_supervision=False)
    net = Network(cfg, seed=0)
    assert not any("side" in name for name in net.parameters)
    out = net.forward(Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)))
    assert out.side_logits == []
    assert out.block_tensors.acbs[0].side_logits is None


def test_icm_disabled_skip_is_conv2_out():
    rng = np.random.default_rng(5)
    cfg = small_cfg(icm_enabled=())
    net = Network(cfg, seed=0)
    out = net.forward(image(rng, cfg))
    for t in out.block_tensors.acbs:
        assert t.icm_skip is t.conv2_out


def test_icm_enabled_skip_differs_from_conv2_out():
    rng = np.random.default_rng(5)
    cfg = small_cfg()
    net = Network(cfg, seed=0)
    out = net.forward(image(rng, cfg))
    t = out.block_tensors.acbs[0]
    assert t.icm_skip is not t.conv2_out
    assert t.icm_skip.shape == t.conv2_out.shape


def test_multichannel_input_supported():
    rng = np.random.default_rng(9)
    cfg = small_cfg(in_channels=3)
    net = Network(cfg, seed=0)
    out = net.forward(image(rng, cfg))
    assert out.final_logits.shape == (1, 2, 8, 8)


# ----------------------------------------------------------- gradients

def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(11)
    cfg = NetworkConfig(depth=2, base_width=4, in_channels=1)
    net = Network(cfg, seed=0)
    with Tape() as tape:
        out = net.forward(image(rng, cfg, size=16))
        loss = _sumsq([out.final_logits] + out.side_logits)
    tape.backward(loss)
    dead = [name for name, p in net.parameters.items()
            if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_full_graph_gradcheck_tiny():
    # spot-check a few parameters end to end; the exhaustive version runs
    # in the acceptance suite
    rng = np.random.default_rng(2)
    with precision("float64"):
        cfg = small_cfg()
        net = Network(cfg, seed=3)
        x = Tensor(rng.normal(size=(1, 1, 8, 8)))
        picks = [net.parameters[n] for n in
                 ("acb1/conv1/weight", "acb1/icm/aspp/branch_r4/weight",
                  "aeb1/up/weight", "aeb2/msa/raw_align/weight", "head/bias")]
        err = grad_check(lambda: _sumsq_forward(net, x), picks, eps=1e-5)
    assert err < 1e-3


def _sumsq_forward(net, x):
    out = net.forward(x)
    return _sumsq([out.final_logits] + out.side_logits)


# ------------------------------------------------------------ describe

def test_describe_matches_golden_text():
    net = Network(NetworkConfig(), seed=0)
    assert describe(net) == GOLDEN_DESCRIBE


def test_describe_reflects_ablated_config():
    net = Network(NetworkConfig(depth=2, base_width=2, icm_enabled=(),
                                msa_raw_image=(), dense_connections=False), seed=0)
    text = describe(net)
    assert "icm blocks: none" in text
    assert "raw image into msa: none" in text
    assert "dense connections: off" in text
    assert "side heads: 4" in text
    for line in text.splitlines():
        if line.startswith("aeb"):
            assert "raw" not in line and "dense" not in line
