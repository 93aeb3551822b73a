"""Calibrator and GC-module tests."""
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnet import ops, oracles
from gcnet.calibrators import (
    ECAL_KINDS,
    GCConfig,
    calibrate,
    chunk_assignment,
    comparison_calibrator,
    ecal_g,
    ecal_l,
    ecal_s,
    ecal_t,
    gate_logits,
    gc_forward,
    make_calibrator,
    make_gc_specs,
)
from gcnet.accounting import ecal_param_count
from gcnet.errors import ConfigError, DimensionError
from gcnet.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def _zero(kind, c, bn=False):
    return make_calibrator(kind, c, use_batchnorm=bn, init="zeros")


def _identity_kernel(spec):
    w = spec.params["weight"].data
    w[:] = 0
    c = spec.channels
    if w.ndim == 2:
        w[:] = np.eye(c)
    else:
        centre = tuple(k // 2 for k in w.shape[2:])
        for i in range(c):
            w[(i, i) + centre] = 1.0
    return spec


# ------------------------------------------------------------ hand examples

@pytest.mark.parametrize("kind", list(ECAL_KINDS.values()))
def test_zero_params_halve_input(rng, kind):
    x = rng.standard_normal((2, 3, 4, 4, 3))
    out = calibrate(Tensor(x), _zero(kind, 3, bn=True)).data
    np.testing.assert_array_equal(out, x / 2)


def test_ecal_g_zero_input():
    spec = make_calibrator("ECalG", 4, np.random.default_rng(0))
    assert np.all(ecal_g(Tensor(np.zeros((1, 2, 2, 2, 4))), spec).data == 0)


def test_ecal_g_hand_value():
    spec = _identity_kernel(_zero("ECalG", 1))
    out = ecal_g(Tensor(np.full((1, 2, 2, 2, 1), 2.0)), spec).data
    np.testing.assert_allclose(out, 2 / (1 + np.exp(-2.0)), atol=1e-15)
    assert out.flat[0] == pytest.approx(1.761594, abs=1e-6)


def test_ecal_s_hand_value():
    spec = _identity_kernel(_zero("ECalS", 1))
    x = np.array([0.0, 2.0]).reshape(1, 2, 1, 1, 1)
    out = ecal_s(Tensor(x), spec).data.ravel()
    assert out[0] == 0.0
    assert out[1] == pytest.approx(1.462117, abs=1e-6)


def test_ecal_s_gate_invariant_to_frame_order(rng):
    spec = make_calibrator("ECalS", 3, rng)
    x = rng.standard_normal((1, 5, 4, 4, 3))
    perm = rng.permutation(5)
    a = gate_logits(Tensor(x), spec).data
    b = gate_logits(Tensor(x[:, perm]), spec).data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_ecal_t_hand_value():
    spec = _identity_kernel(_zero("ECalT", 1))
    x = np.array([0.0, 2.0]).reshape(1, 2, 1, 1, 1)
    out = ecal_t(Tensor(x), spec).data.ravel()
    assert out[0] == 0.0
    assert out[1] == pytest.approx(1.761594, abs=1e-6)


def test_ecal_t_gate_invariant_to_pixel_permutation(rng):
    spec = make_calibrator("ECalT", 2, rng)
    x = rng.standard_normal((1, 4, 3, 3, 2))
    flat = x.reshape(1, 4, 9, 2)
    shuffled = flat[:, :, rng.permutation(9)].reshape(x.shape)
    np.testing.assert_allclose(
        gate_logits(Tensor(x), spec).data, gate_logits(Tensor(shuffled), spec).data, atol=1e-14
    )


def test_ecal_l_identity_kernel_is_self_gating(rng):
    spec = _identity_kernel(_zero("ECalL", 3))
    x = rng.standard_normal((1, 4, 3, 3, 3))
    np.testing.assert_allclose(ecal_l(Tensor(x), spec).data, x / (1 + np.exp(-x)), atol=1e-15)


def test_ecal_l_matches_composed_oracle(rng):
    spec = make_calibrator("ECalL", 4, rng)
    spec.params["bias"].data[:] = rng.standard_normal(4)
    x = rng.standard_normal((1, 4, 3, 3, 4))
    np.testing.assert_allclose(ecal_l(Tensor(x), spec).data, oracles.ecal(x, spec), atol=1e-12)


@pytest.mark.parametrize("kind", list(ECAL_KINDS.values()))
def test_every_ecal_matches_oracle_with_bn(rng, kind):
    spec = make_calibrator(kind, 3, rng, use_batchnorm=True)
    spec.bn.running_mean[:] = rng.standard_normal(3)
    spec.bn.running_var[:] = rng.uniform(0.5, 2, 3)
    spec.bn.gamma.data[:] = rng.uniform(0.5, 2, 3)
    x = rng.standard_normal((2, 3, 4, 4, 3))
    np.testing.assert_allclose(calibrate(Tensor(x), spec).data, oracles.ecal(x, spec), atol=1e-12)


def test_channel_mismatch(rng):
    spec = make_calibrator("ECalG", 4, rng)
    with pytest.raises(DimensionError):
        ecal_g(Tensor(np.zeros((1, 1, 1, 1, 3))), spec)
    with pytest.raises(DimensionError):
        comparison_calibrator(Tensor(np.zeros((1, 1, 1, 1, 3))), make_calibrator("SE3D", 64, rng))


def test_shape_contracts():
    assert make_calibrator("ECalG", 16).params["weight"].shape == (16, 16)
    assert make_calibrator("ECalS", 16).params["weight"].shape == (16, 16, 1, 3, 3)
    assert make_calibrator("ECalT", 16).params["weight"].shape == (16, 16, 3, 1, 1)
    assert make_calibrator("ECalL", 16).params["weight"].shape == (16, 16, 3, 1, 1)


# ------------------------------------------------------------- comparison

def test_ge3d_g_zero_input():
    spec = make_calibrator("GE3D_G", 4)
    x = np.zeros((1, 2, 3, 3, 4))
    assert np.all(ops.sigmoid(gate_logits(Tensor(x), spec)).data == 0.5)
    assert np.all(comparison_calibrator(Tensor(x), spec).data == 0)


def test_se3d_zero_params_halve(rng):
    x = rng.standard_normal((1, 2, 3, 3, 64))
    np.testing.assert_array_equal(comparison_calibrator(Tensor(x), _zero("SE3D", 64)).data, x / 2)


def test_se3d_param_count_formula():
    spec = make_calibrator("SE3D", 64)
    weights = sum(t.data.size for k, t in spec.params.items() if k.endswith("weight"))
    assert weights == 512 == 2 * 64 * 64 // 16


@pytest.mark.parametrize("kind", ["SE3D", "GE3D_G", "GE3D_C", "S3DG"])
def test_comparison_preserves_shape(rng, kind):
    x = rng.standard_normal((1, 8, 7, 7, 32))
    out = comparison_calibrator(Tensor(x), make_calibrator(kind, 32, rng))
    assert out.shape == x.shape


# ------------------------------------------------------------------ GC module

def test_p_to_zero_identity(rng):
    x = Tensor(rng.standard_normal((1, 2, 2, 2, 8)))
    assert gc_forward(x, None, {}) is x


def test_gc_p1_zero_params_halves_everything(rng):
    cfg = GCConfig(1)
    specs = make_gc_specs(cfg, 16, init="zeros")
    x = rng.standard_normal((2, 3, 3, 3, 16))
    np.testing.assert_array_equal(gc_forward(Tensor(x), cfg, specs).data, x / 2)


def test_gc_half_standard_slices(rng):
    cfg = GCConfig(Fraction(1, 2))
    specs = make_gc_specs(cfg, 8, rng)
    x = rng.standard_normal((1, 3, 3, 3, 8))
    y = gc_forward(Tensor(x), cfg, specs).data
    np.testing.assert_array_equal(y[..., 4:], x[..., 4:])
    assert np.all(y[..., :4] != x[..., :4])
    np.testing.assert_allclose(y, oracles.gc_forward(x, cfg, specs), atol=1e-12)


@pytest.mark.parametrize("block", range(9))
def test_gc_loop_matches_slice_oracle(rng, block):
    cfg = GCConfig(Fraction(1, 2), "loop")
    specs = make_gc_specs(cfg, 16, rng)
    x = rng.standard_normal((1, 3, 2, 2, 16))
    np.testing.assert_allclose(gc_forward(Tensor(x), cfg, specs, block).data, oracles.gc_forward(x, cfg, specs, block), atol=1e-12)


def test_chunk_assignment_examples():
    assert chunk_assignment(GCConfig(Fraction(1, 2)), 5) == {"G": 0, "S": 1, "T": 2, "L": 3}
    assert chunk_assignment(GCConfig(1, "loop"), 1) == {"G": 1, "S": 2, "T": 3, "L": 0}
    loop = GCConfig(Fraction(1, 2), "loop")
    assert chunk_assignment(loop, 8) == chunk_assignment(loop, 0)


def test_single_calibrator_ablation_keeps_slot(rng):
    cfg = GCConfig(1, enabled=("T",))
    specs = make_gc_specs(cfg, 8, rng)
    assert list(specs) == ["T"]
    x = rng.standard_normal((1, 3, 2, 2, 8))
    y = gc_forward(Tensor(x), cfg, specs).data
    np.testing.assert_array_equal(np.delete(y, [4, 5], axis=4), np.delete(x, [4, 5], axis=4))


def test_collision_is_internal_error(rng, monkeypatch):
    from gcnet import calibrators

    cfg = GCConfig(1)
    specs = make_gc_specs(cfg, 8, rng)
    monkeypatch.setattr(calibrators, "chunk_assignment", lambda c, b: {"G": 0, "S": 0, "T": 2, "L": 3})
    with pytest.raises(AssertionError, match="chunk 0"):
        gc_forward(Tensor(np.zeros((1, 1, 1, 1, 8))), cfg, specs)


@pytest.mark.parametrize(
    "kwargs", [dict(p=0), dict(p=Fraction(3, 2)), dict(placement="ring"), dict(p=Fraction(3, 8), placement="loop")]
)
def test_illegal_configs(kwargs):
    with pytest.raises(ConfigError):
        GCConfig(**kwargs)


def test_indivisible_channels():
    with pytest.raises(ConfigError):
        GCConfig(Fraction(1, 2)).validate(12)


# ---------------------------------------------------------------- properties

legal = st.sampled_from([(Fraction(1, 4), 16), (Fraction(1, 4), 32), (Fraction(1, 2), 8), (Fraction(1, 2), 16), (Fraction(1), 4), (Fraction(1), 12)])


@settings(max_examples=30, deadline=None)
@given(legal, st.sampled_from(["standard", "loop"]), st.integers(0, 20), st.integers(0, 2**31))
def test_gc_preserves_shape_and_bounds(pc, placement, block, seed):
    p, c = pc
    cfg = GCConfig(p, placement)
    rng = np.random.default_rng(seed)
    specs = make_gc_specs(cfg, c, rng)
    x = rng.standard_normal((1, 3, 3, 3, c)) * 4
    y = gc_forward(Tensor(x), cfg, specs, block).data
    assert y.shape == x.shape
    assert np.all(np.abs(y) <= np.abs(x))
    assert np.all(np.sign(y) == np.sign(x))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(list(ECAL_KINDS.values())), st.integers(0, 2**31), st.floats(0.1, 30))
def test_gate_strictly_inside_unit_interval(kind, seed, scale):
    rng = np.random.default_rng(seed)
    spec = make_calibrator(kind, 2, rng, use_batchnorm=True)
    x = rng.standard_normal((2, 3, 3, 3, 2)) * scale
    z = gate_logits(Tensor(x), spec).data
    gate = ops.sigmoid(Tensor(z)).data
    assert np.all((gate >= 0) & (gate <= 1))
    # float64 sigmoid rounds to exactly 1 beyond z ~ 36.7
    inside = np.abs(z) < 36
    assert np.all((gate[inside] > 0) & (gate[inside] < 1))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(list(ECAL_KINDS.values())), st.integers(0, 2**31))
def test_gate_constancy_axes(kind, seed):
    axes = {"ECalG": (1, 2, 3), "ECalS": (1,), "ECalT": (2, 3), "ECalL": ()}[kind]
    rng = np.random.default_rng(seed)
    spec = make_calibrator(kind, 3, rng, use_batchnorm=True)
    x = rng.standard_normal((2, 4, 3, 3, 3))
    gate = np.broadcast_to(ops.sigmoid(gate_logits(Tensor(x), spec)).data, x.shape)
    for a in axes:
        # max == min along the axis: variance is exactly zero
        assert np.all(np.ptp(gate, axis=a) == 0)
    if kind == "ECalL":
        assert np.ptp(gate, axis=1).max() > 0


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([Fraction(1, 4), Fraction(1, 2), Fraction(1)]), st.integers(0, 50))
def test_loop_period_and_coverage(p, start):
    cfg = GCConfig(p, "loop")
    n = cfg.period
    assert n == 4 / p
    assert chunk_assignment(cfg, start) == chunk_assignment(cfg, start + n)
    for letter in "GSTL":
        assert {chunk_assignment(cfg, start + b)[letter] for b in range(n)} == set(range(n))


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([Fraction(1, 4), Fraction(1, 2), Fraction(1)]), st.integers(0, 2**31))
def test_uncalibrated_passthrough_bit_exact(p, seed):
    rng = np.random.default_rng(seed)
    cfg = GCConfig(p)
    c = 16
    specs = make_gc_specs(cfg, c, rng)
    x = rng.standard_normal((1, 2, 2, 2, c))
    k = int(p * c)
    y = gc_forward(Tensor(x), cfg, specs).data
    assert y[..., k:].tobytes() == x[..., k:].tobytes()


def test_calibrator_param_count_matches_accounting():
    for kind in ECAL_KINDS.values():
        spec = make_calibrator(kind, 16)
        w = spec.params["weight"].data.size
        assert w == ecal_param_count(kind, 1, 64)
