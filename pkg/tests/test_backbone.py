"""Bottleneck blocks and whole-network construction."""
from fractions import Fraction

import numpy as np
import pytest

from gcnet import ops, oracles
from gcnet.backbone import (
    BlockParams,
    BlockSpec,
    NetworkSpec,
    bottleneck_forward,
    build_network,
    count_sites,
    format_config,
    forward_classify,
    network_spec,
    parse_config,
    spec_from_options,
)
from gcnet.calibrators import GCConfig
from gcnet.errors import ConfigError, DimensionError
from gcnet.ops import BatchNormParams
from gcnet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def _bn(c, rng=None):
    bn = BatchNormParams.identity(c)
    if rng is not None:
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, c)
        bn.beta.data[:] = rng.standard_normal(c) * 0.1
        bn.running_mean[:] = rng.standard_normal(c) * 0.1
        bn.running_var[:] = rng.uniform(0.5, 1.5, c)
    return bn


def _params(spec: BlockSpec, rng, zero=False):
    w, cin = spec.width, spec.in_channels
    draw = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.standard_normal(s) * 0.3)
    kw = {}
    if spec.style == "GST":
        cs, ct = spec.gst_split
        kw["conv2s"] = Tensor(draw(cs, cs, 1, 3, 3))
        kw["conv2t"] = Tensor(draw(ct, ct, 3, 3, 3))
    else:
        kw["conv2"] = Tensor(draw(w, w, 1, 3, 3))
    if spec.has_projection:
        kw["down_conv"] = Tensor(draw(4 * w, cin, 1, 1, 1))
        kw["down_bn"] = _bn(4 * w, None if zero else rng)
    b = None if zero else rng
    return BlockParams(
        conv1=Tensor(draw(w, cin, 1, 1, 1)), bn1=_bn(w, b), bn2=_bn(w, b),
        conv3=Tensor(draw(4 * w, w, 1, 1, 1)), bn3=_bn(4 * w, b), **kw,
    )


def _bn_ref(x, bn):
    return oracles.batch_norm(x, bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var, bn.eps)


@pytest.mark.parametrize("stride,cin", [(1, 8), (2, 8), (1, 4)])
def test_plain_block_matches_composed_oracle(rng, stride, cin):
    spec = BlockSpec("TSN", 2, cin, stride)
    p = _params(spec, rng)
    x = rng.standard_normal((1, 3, 4, 4, cin))
    got = bottleneck_forward(Tensor(x), spec, p).data
    s = (1, stride, stride)
    h = oracles.relu(_bn_ref(oracles.conv(x, p.conv1.data, padding=(0, 0, 0)), p.bn1))
    h = oracles.relu(_bn_ref(oracles.conv(h, p.conv2.data, stride=s), p.bn2))
    h = _bn_ref(oracles.conv(h, p.conv3.data, padding=(0, 0, 0)), p.bn3)
    if spec.has_projection:
        sc = _bn_ref(oracles.conv(x, p.down_conv.data, stride=s, padding=(0, 0, 0)), p.down_bn)
    else:
        sc = x
    np.testing.assert_allclose(got, oracles.relu(h + sc), atol=1e-12)


def test_gst_split_sizes():
    assert BlockSpec("GST", 64, 256).gst_split == (48, 16)


def test_zero_weights_identity_shortcut_is_relu(rng):
    spec = BlockSpec("TSN", 4, 16, 1)
    assert not spec.has_projection
    x = rng.standard_normal((2, 3, 3, 3, 16))
    out = bottleneck_forward(Tensor(x), spec, _params(spec, rng, zero=True)).data
    np.testing.assert_array_equal(out, np.maximum(x, 0))


def test_tsm_fold_zero_equals_tsn(rng):
    tsn = BlockSpec("TSN", 4, 16)
    tsm = BlockSpec("TSM", 4, 16, fold_ratio=Fraction(0))
    p = _params(tsn, rng)
    x = rng.standard_normal((2, 4, 3, 3, 16))
    a = bottleneck_forward(Tensor(x), tsn, p).data
    b = bottleneck_forward(Tensor(x), tsm, p).data
    assert a.tobytes() == b.tobytes()


def test_tsm_shift_changes_output(rng):
    p = _params(BlockSpec("TSN", 4, 16), rng)
    x = rng.standard_normal((1, 4, 3, 3, 16))
    a = bottleneck_forward(Tensor(x), BlockSpec("TSN", 4, 16), p).data
    b = bottleneck_forward(Tensor(x), BlockSpec("TSM", 4, 16), p).data
    assert not np.allclose(a, b)


def test_gst_temporal_identity_reduces_to_split_2d(rng):
    gst = BlockSpec("GST", 8, 32)
    p = _params(gst, rng)
    cs, ct = gst.gst_split
    k2 = rng.standard_normal((ct, ct, 1, 3, 3))
    p.conv2t.data[:] = 0
    p.conv2t.data[:, :, 1:2] = k2
    # block-diagonal 2D kernel: the same computation as one TSN conv
    dense = np.zeros((8, 8, 1, 3, 3))
    dense[:cs, :cs] = p.conv2s.data
    dense[cs:, cs:] = k2
    tsn = BlockSpec("TSN", 8, 32)
    q = BlockParams(conv1=p.conv1, bn1=p.bn1, bn2=p.bn2, conv3=p.conv3, bn3=p.bn3, conv2=Tensor(dense))
    x = rng.standard_normal((1, 4, 4, 4, 32))
    np.testing.assert_allclose(
        bottleneck_forward(Tensor(x), gst, p).data, bottleneck_forward(Tensor(x), tsn, q).data, atol=1e-12
    )


def test_residual_shape_mismatch(rng):
    spec = BlockSpec("TSN", 4, 16)
    with pytest.raises(DimensionError):
        bottleneck_forward(Tensor(np.zeros((1, 2, 3, 3, 8))), spec, _params(spec, rng))


# ------------------------------------------------------------------ network

def _tiny(**kw):
    base = dict(
        style="TSN", depth="micro", stage_blocks=(2,), widths=(8,), stage_strides=(1,),
        stem_channels=16, stem_kernel=3, stem_stride=2, stem_pool=False, in_channels=1,
        insertion_mask=(True,), frames=4, resolution=8, num_classes=5,
    )
    base.update(kw)
    return NetworkSpec(**base)


def test_site_counts():
    assert count_sites(spec_from_options("TSN", p="1")) == 16
    assert count_sites(spec_from_options("TSN", p="1", mask="0010")) == 6
    assert count_sites(spec_from_options("TSN", p="0")) == 0


def test_same_seed_same_parameters():
    spec = _tiny(gc=GCConfig(1))
    a, b = build_network(spec, seed=3), build_network(spec, seed=3)
    assert list(a.params) == list(b.params)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    c = build_network(spec, seed=4)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_illegal_gc_rejected_at_build():
    with pytest.raises(ConfigError):
        build_network(_tiny(gc=GCConfig(Fraction(1, 4), "loop"), widths=(8,)))


def test_zero_head_zero_input_gives_zero_logits():
    m = build_network(_tiny(gc=GCConfig(1)), seed=0)
    m.params["fc.weight"].data[:] = 0
    out = forward_classify(m, Tensor(np.zeros((2, 4, 8, 8, 1))))
    assert out.shape == (2, 5)
    assert np.all(out.data == 0)


@pytest.mark.parametrize("gc", [None, GCConfig(Fraction(1, 2), "loop")])
@pytest.mark.parametrize("style", ["TSN", "TSM", "GST"])
def test_logit_shape(rng, gc, style):
    m = build_network(_tiny(style=style, gc=gc), seed=0)
    out = m(Tensor(rng.standard_normal((3, 4, 8, 8, 1))))
    assert out.shape == (3, 5)


def test_resolution_mismatch():
    m = build_network(_tiny(), seed=0)
    with pytest.raises(DimensionError):
        m(Tensor(np.zeros((1, 4, 16, 16, 1))))


def test_gc_never_changes_activation_shapes(rng):
    shapes = {}
    for gc in (None, GCConfig(1)):
        m = build_network(_tiny(gc=gc), seed=0)
        seen = []
        x = Tensor(rng.standard_normal((1, 4, 8, 8, 1)))
        h = ops.relu(ops.batch_norm(ops.conv(x, ops.ConvParams(m.params["stem.conv.weight"], stride=(1, 2, 2))), m._bns[0]))
        for _, block, bp, site in m.blocks:
            h = bottleneck_forward(h, block, bp, site or 0)
            seen.append(h.shape)
        shapes[gc is None] = seen
    assert shapes[True] == shapes[False]


@pytest.mark.parametrize("p", [Fraction(1), Fraction(1, 2)])
def test_zero_calibrators_equal_scaled_plain_network(rng, p):
    gc_model = build_network(_tiny(gc=GCConfig(p)), seed=0)
    for k, t in gc_model.params.items():
        if k.startswith("gc."):
            t.data[:] = 0
    plain = build_network(_tiny(), seed=0)
    state = {k: v for k, v in gc_model.state_dict().items() if not k.startswith("gc.")}
    plain.load_state_dict(state)
    k = int(p * 8)
    for name, _, bp, _ in plain.blocks:
        # halving the calibrated output rows of conv2 is what the 0.5 gates do
        bp.conv2.data[:k] *= 0.5
    x = Tensor(rng.standard_normal((2, 4, 8, 8, 1)))
    np.testing.assert_allclose(gc_model(x).data, plain(x).data, atol=1e-12)


def test_training_smoke_separates_two_constant_clips():
    m = build_network(_tiny(num_classes=2, gc=GCConfig(1)), seed=0)
    x = np.stack([np.full((4, 8, 8, 1), 1.0), np.full((4, 8, 8, 1), -1.0)])
    y = np.array([0, 1])
    params = list(m.params.values())
    for _ in range(30):
        m.train()
        m.zero_grad()
        loss = ops.softmax_cross_entropy(m(Tensor(x)), y)
        loss.backward()
        for t in params:
            if t.grad is not None:
                t.data -= 0.1 * t.grad
    m.eval()
    assert list(m(Tensor(x)).data.argmax(1)) == [0, 1]


def test_state_dict_roundtrip_strict(rng):
    spec = _tiny(gc=GCConfig(1))
    a, b = build_network(spec, seed=0), build_network(spec, seed=1)
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.standard_normal((1, 4, 8, 8, 1)))
    assert a(x).data.tobytes() == b(x).data.tobytes()
    state = a.state_dict()
    state.pop("fc.bias")
    with pytest.raises(ConfigError):
        b.load_state_dict(state)


def test_config_text_roundtrip():
    spec = spec_from_options("GST", p="1/2", placement="loop", mask="0110", frames=16, classes=10)
    assert parse_config(format_config(spec)) == spec
    with pytest.raises(ConfigError):
        parse_config("style=TSN\nwidth=3\n")


def test_gst_defaults_calibrator_bn_off():
    assert spec_from_options("GST", p="1").gc.use_batchnorm is False
    assert spec_from_options("TSM", p="1").gc.use_batchnorm is True


def test_micro_depth_geometry():
    spec = network_spec("micro")
    assert spec.stage_blocks == (1, 1, 1) and spec.widths == (16, 32, 64)
