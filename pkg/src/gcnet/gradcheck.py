"""Central finite-difference gradient checks for every differentiable kernel.

A check contracts the op output with a fixed random tensor ``R`` so the
scalar objective ``sum(out * R)`` exercises every output element, then compares
the analytic gradient of each input with ``(f(x+h) - f(x-h)) / 2h``.

An element passes if its absolute difference is at most ``abs_floor`` or its
relative difference ``|a - n| / max(|a|, |n|)`` is below ``rtol``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import calibrators as cal
from . import ops
from .backbone import BlockParams, BlockSpec, bottleneck_forward
from .ops import BatchNormParams, ConvParams
from .tensor import Tensor

STEP = 1e-5
RTOL = 1e-5
ABS_FLOOR = 1e-8

# A case builder returns (function of input tensors, list of input arrays).
Case = Callable[[np.random.Generator], Tuple[Callable[..., Tensor], List[np.ndarray]]]


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    passed: bool
    trials: int
    max_abs_error: float = 0.0


def _max_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= ABS_FLOOR, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def check_function(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    step: float = STEP,
) -> float:
    """Max relative gradient error of ``fn`` over all ``inputs`` elements."""
    return gradient_errors(fn, inputs, rng, step)[0]


def gradient_errors(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    step: float = STEP,
) -> Tuple[float, float]:
    """(max relative error under the floor rule, max absolute difference)."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weight = rng.normal(size=out.shape)
    out.backward(weight)
    worst = 0.0
    worst_abs = 0.0

    def objective() -> float:
        res = fn(*[Tensor(a) for a in arrays])
        return float(np.sum(res.data * weight))

    for arr, t in zip(arrays, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective()
            flat[i] = orig - step
            down = objective()
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * step)
        worst = max(worst, _max_error(analytic, numeric))
        if arr.size:
            worst_abs = max(worst_abs, float(np.max(np.abs(analytic - numeric))))
    return worst, worst_abs


# ----------------------------------------------------------------- cases

def _shape(rng, max_extent=4, channels=(1, 5)):
    n = int(rng.integers(1, 3))
    t, h, w = (int(v) for v in rng.integers(1, max_extent + 1, size=3))
    c = int(rng.integers(channels[0], channels[1] + 1))
    return n, t, h, w, c


def _bn(c: int, mode: str, gamma, beta, rng) -> BatchNormParams:
    p = BatchNormParams(
        gamma=gamma,
        beta=beta,
        running_mean=rng.normal(size=c),
        running_var=rng.uniform(0.5, 2.0, size=c),
        mode=mode,
    )
    return p


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def case_pool_global(rng):
    return ops.pool_global, [rng.normal(size=_shape(rng))]


def case_pool_over_time(rng):
    return ops.pool_over_time, [rng.normal(size=_shape(rng))]


def case_pool_over_space(rng):
    return ops.pool_over_space, [rng.normal(size=_shape(rng))]


def case_fully_connected(rng):
    n = int(rng.integers(1, 4))
    ci, co = (int(v) for v in rng.integers(1, 6, size=2))
    return ops.fully_connected, [rng.normal(size=(n, 1, 1, 1, ci)), rng.normal(size=(co, ci)), rng.normal(size=co)]


def case_conv(rng):
    shape = _shape(rng)
    ci = shape[4]
    co = int(rng.integers(1, 5))
    k = tuple(int(rng.choice([1, 3])) for _ in range(3))
    stride = tuple(int(rng.choice([1, 2])) for _ in range(3))

    def fn(x, w, b):
        return ops.conv(x, ConvParams(w, b, stride=stride))

    return fn, [rng.normal(size=shape), rng.normal(size=(co, ci) + k), rng.normal(size=co)]


def case_conv_depthwise(rng):
    shape = _shape(rng)
    c = shape[4]

    def fn(x, w, b):
        return ops.conv(x, ConvParams(w, b, stride=2, groups=c))

    return fn, [rng.normal(size=shape), rng.normal(size=(c, 1, 3, 3, 3)), rng.normal(size=c)]


def case_sigmoid(rng):
    return ops.sigmoid, [rng.normal(scale=2.0, size=_shape(rng))]


def case_relu(rng):
    return ops.relu, [_away_from_zero(rng, _shape(rng))]


def case_gate_apply(rng):
    shape = _shape(rng)
    gshape = tuple(d if rng.random() < 0.5 else 1 for d in shape)
    return ops.gate_apply, [rng.normal(size=shape), rng.normal(size=gshape)]


def case_split_concat(rng):
    shape = _shape(rng, channels=(2, 5))
    c = shape[4]
    cut = int(rng.integers(1, c))

    def fn(x):
        a, b = ops.split_channels(x, [cut, c - cut])
        # swap the parts so routing mistakes show up
        return ops.concat_channels([ops.scale(b, 2.0), a])

    return fn, [rng.normal(size=shape)]


def case_temporal_shift(rng):
    shape = _shape(rng, channels=(2, 5))
    ratio = Fraction(int(rng.integers(0, 3)), 4)
    if 2 * int(ratio * shape[4]) > shape[4]:
        ratio = Fraction(1, 4)
    return (lambda x: ops.temporal_shift(x, ratio)), [rng.normal(size=shape)]


def case_batch_norm_train(rng):
    shape = _shape(rng)
    if np.prod(shape[:4]) < 2:
        shape = (2,) + shape[1:]
    c = shape[4]

    def fn(x, g, b):
        return ops.batch_norm(x, _bn(c, "train", g, b, np.random.default_rng(0)))

    return fn, [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)]


def case_batch_norm_eval(rng):
    shape = _shape(rng)
    c = shape[4]
    stats = np.random.default_rng(int(rng.integers(1 << 30)))
    rm, rv = stats.normal(size=c), stats.uniform(0.5, 2.0, size=c)

    def fn(x, g, b):
        return ops.batch_norm(x, BatchNormParams(g, b, rm.copy(), rv.copy(), mode="eval"))

    return fn, [rng.normal(size=shape), rng.normal(size=c), rng.normal(size=c)]


def case_add(rng):
    shape = _shape(rng)
    return ops.add, [rng.normal(size=shape), rng.normal(size=shape)]


def case_max_pool(rng):
    shape = _shape(rng, max_extent=5)
    # distinct values keep the argmax stable under the finite-difference step
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.1
    return ops.max_pool_spatial, [x]


def case_upsample(rng):
    shape = _shape(rng, max_extent=2)
    size = tuple(int(v) for v in rng.integers(1, 5, size=3))
    return (lambda x: ops.upsample_nearest(x, size)), [rng.normal(size=shape)]


def case_cross_entropy(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=n)
    return (lambda z: ops.softmax_cross_entropy(z, labels)), [rng.normal(size=(n, k))]


def _ecal_case(kind: str):
    def build(rng):
        shape = _shape(rng)
        c = shape[4]
        spec = cal.make_calibrator(kind, c, rng, use_batchnorm=True)
        names = list(spec.params)
        stats = np.random.default_rng(int(rng.integers(1 << 30)))
        rm, rv = stats.normal(size=c), stats.uniform(0.5, 2.0, size=c)

        def fn(x, *tensors):
            params = dict(zip(names, tensors[: len(names)]))
            g, b = tensors[len(names) :]
            s = cal.CalibratorSpec(kind, c, params, BatchNormParams(g, b, rm.copy(), rv.copy()))
            return cal.calibrate(x, s)

        inputs = [rng.normal(size=shape)] + [
            rng.normal(scale=0.5, size=spec.params[k].shape) for k in names
        ]
        inputs += [rng.normal(size=c), rng.normal(size=c)]
        return fn, inputs

    return build


def _comparison_case(kind: str):
    def build(rng):
        shape = _shape(rng)
        c = shape[4]
        spec = cal.make_calibrator(kind, c, rng)
        names = list(spec.params)

        def fn(x, *tensors):
            return cal.calibrate(x, cal.CalibratorSpec(kind, c, dict(zip(names, tensors))))

        inputs = [rng.normal(size=shape)] + [rng.normal(scale=0.5, size=spec.params[k].shape) for k in names]
        return fn, inputs

    return build


def case_gc_forward(rng):
    n, t, h, w, _ = _shape(rng, max_extent=3)
    p = Fraction(1) if rng.random() < 0.5 else Fraction(1, 2)
    chunk = int(rng.integers(1, 3))
    c = int(4 * chunk / p)
    placement = "loop" if rng.random() < 0.5 else "standard"
    cfg = cal.GCConfig(p=p, placement=placement)
    specs = cal.make_gc_specs(cfg, c, rng)
    block_index = int(rng.integers(0, 8))
    for s in specs.values():
        s.bn.running_mean = rng.normal(size=s.channels)
        s.bn.running_var = rng.uniform(0.5, 2.0, size=s.channels)
    order = [(k, name) for k, s in specs.items() for name in s.named_tensors()]

    def fn(x, *tensors):
        for (k, name), tensor in zip(order, tensors):
            spec = specs[k]
            if name == "bn.gamma":
                spec.bn.gamma = tensor
            elif name == "bn.beta":
                spec.bn.beta = tensor
            else:
                spec.params[name] = tensor
        return cal.gc_forward(x, cfg, specs, block_index)

    inputs = [rng.normal(size=(n, t, h, w, c))]
    inputs += [rng.normal(scale=0.5, size=specs[k].named_tensors()[name].shape) for k, name in order]
    return fn, inputs


def case_bottleneck(rng):
    style = str(rng.choice(["TSN", "TSM", "GST"]))
    width = 4
    in_ch = int(rng.choice([4, 16]))
    stride = int(rng.choice([1, 2]))
    n, t, h, w, _ = _shape(rng, max_extent=3)
    block = BlockSpec(style, width, in_ch, stride, fold_ratio=Fraction(1, 4))
    stats = np.random.default_rng(int(rng.integers(1 << 30)))

    def bn(c, g, b):
        return BatchNormParams(g, b, stats.normal(size=c), stats.uniform(0.5, 2.0, size=c))

    if style == "GST":
        mids = [(3, 3, 1, 3, 3), (1, 1, 3, 3, 3)]
    else:
        mids = [(width, width, 1, 3, 3)]
    shapes = [(width, in_ch, 1, 1, 1)] + mids + [(4 * width, width, 1, 1, 1)]
    if block.has_projection:
        shapes.append((4 * width, in_ch, 1, 1, 1))
    bn_sizes = [width, width, 4 * width] + ([4 * width] if block.has_projection else [])
    bn_stats = [(stats.normal(size=c), stats.uniform(0.5, 2.0, size=c)) for c in bn_sizes]

    def fn(x, *tensors):
        convs = list(tensors[: len(shapes)])
        affine = tensors[len(shapes) :]
        bns = [
            BatchNormParams(affine[2 * i], affine[2 * i + 1], rm.copy(), rv.copy())
            for i, (rm, rv) in enumerate(bn_stats)
        ]
        kw = dict(conv1=convs[0], bn1=bns[0], bn2=bns[1], bn3=bns[2])
        if style == "GST":
            kw.update(conv2s=convs[1], conv2t=convs[2], conv3=convs[3])
            rest = convs[4:]
        else:
            kw.update(conv2=convs[1], conv3=convs[2])
            rest = convs[3:]
        if block.has_projection:
            kw.update(down_conv=rest[0], down_bn=bns[3])
        return bottleneck_forward(x, block, BlockParams(**kw))

    inputs = [rng.normal(size=(n, t, h, w, in_ch))]
    inputs += [rng.normal(scale=0.5, size=s) for s in shapes]
    for c in bn_sizes:
        inputs += [rng.uniform(0.5, 1.5, size=c), rng.normal(scale=0.1, size=c)]
    return fn, inputs


CASES: Dict[str, Case] = {
    "pool_global": case_pool_global,
    "pool_over_time": case_pool_over_time,
    "pool_over_space": case_pool_over_space,
    "fully_connected": case_fully_connected,
    "conv": case_conv,
    "conv_depthwise": case_conv_depthwise,
    "sigmoid": case_sigmoid,
    "relu": case_relu,
    "gate_apply": case_gate_apply,
    "split_concat": case_split_concat,
    "temporal_shift": case_temporal_shift,
    "batch_norm_train": case_batch_norm_train,
    "batch_norm_eval": case_batch_norm_eval,
    "add": case_add,
    "max_pool_spatial": case_max_pool,
    "upsample_nearest": case_upsample,
    "softmax_cross_entropy": case_cross_entropy,
    "ecal_g": _ecal_case("ECalG"),
    "ecal_s": _ecal_case("ECalS"),
    "ecal_t": _ecal_case("ECalT"),
    "ecal_l": _ecal_case("ECalL"),
    "se3d": _comparison_case("SE3D"),
    "ge3d_g": _comparison_case("GE3D_G"),
    "ge3d_c": _comparison_case("GE3D_C"),
    "s3dg": _comparison_case("S3DG"),
    "gc_forward": case_gc_forward,
}

# heavier cases that only run on request
EXTRA_CASES: Dict[str, Case] = {"bottleneck": case_bottleneck}


def run_case(name: str, case: Case, trials: int, seed: int = 0) -> GradResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, worst_abs = 0.0, 0.0
    for _ in range(trials):
        fn, inputs = case(rng)
        rel, ab = gradient_errors(fn, inputs, rng)
        worst, worst_abs = max(worst, rel), max(worst_abs, ab)
    return GradResult(name, worst, worst < RTOL, trials, worst_abs)


def run_all(trials: int = 20, seed: int = 0, cases: Dict[str, Case] = None) -> List[GradResult]:
    cases = CASES if cases is None else cases
    return [run_case(name, case, trials, seed) for name, case in cases.items()]
