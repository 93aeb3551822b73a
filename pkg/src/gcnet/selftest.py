"""Invariant suite behind ``gcnet selftest``.

Each check returns ``(name, ok, detail)``. Everything is seeded, so the
printed output is identical from run to run.
"""
from __future__ import annotations

from fractions import Fraction
from typing import Callable, List, Tuple

import numpy as np

from . import oracles, ops
from .accounting import (
    PAPER_FACTORS,
    block_param_count,
    ecal_param_count,
    model_count,
    percentage_table,
    verify_against_enumeration,
)
from .backbone import BlockSpec, build_network, spec_from_options
from .calibrators import (
    ECAL_KINDS,
    GCConfig,
    calibrate,
    chunk_assignment,
    gate_logits,
    gc_forward,
    make_calibrator,
    make_gc_specs,
)
from .ops import BatchNormParams, ConvParams
from .tensor import Tensor

Result = Tuple[str, bool, str]
ORACLE_TOL = 1e-12

TABLE_PERCENT = {
    Fraction(1, 2): {"ECalG": 0.09, "ECalS": 0.83, "ECalT": 0.28, "ECalL": 0.28, "Total": 1.47},
    Fraction(1): {"ECalG": 0.37, "ECalS": 3.31, "ECalT": 1.10, "ECalL": 1.10, "Total": 5.88},
}


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _close(name: str, got: np.ndarray, want: np.ndarray, tol: float = ORACLE_TOL) -> Result:
    if got.shape != want.shape:
        return name, False, f"shape {got.shape} vs {want.shape}"
    err = float(np.max(np.abs(got - want))) if got.size else 0.0
    return name, err <= tol, f"max abs diff {err:.1e}"


def _randomize_bn(spec, rng) -> None:
    if spec.bn is None:
        return
    c = spec.channels
    spec.bn.gamma.data[:] = rng.uniform(0.5, 1.5, c)
    spec.bn.beta.data[:] = rng.standard_normal(c) * 0.1
    spec.bn.running_mean[:] = rng.standard_normal(c) * 0.1
    spec.bn.running_var[:] = rng.uniform(0.5, 1.5, c)


# ----------------------------------------------------------------- oracles

def oracle_checks(seed: int = 0) -> List[Result]:
    rng = np.random.default_rng(seed)
    out: List[Result] = []
    x = _rand(rng, 2, 3, 4, 4, 5)
    out.append(_close("oracle pool_global", ops.pool_global(Tensor(x)).data, oracles.pool_global(x)))
    out.append(_close("oracle pool_over_time", ops.pool_over_time(Tensor(x)).data, oracles.pool_over_time(x)))
    out.append(_close("oracle pool_over_space", ops.pool_over_space(Tensor(x)).data, oracles.pool_over_space(x)))

    v = _rand(rng, 3, 1, 1, 1, 6)
    w, b = _rand(rng, 5, 6), _rand(rng, 5)
    got = ops.fully_connected(Tensor(v), Tensor(w), Tensor(b)).data
    out.append(_close("oracle fully_connected", got, oracles.fully_connected(v, w, b)))

    x = _rand(rng, 1, 4, 5, 5, 3)
    w, b = _rand(rng, 4, 3, 3, 3, 3), _rand(rng, 4)
    got = ops.conv(Tensor(x), ConvParams(Tensor(w), Tensor(b))).data
    out.append(_close("oracle conv 3x3x3 same", got, oracles.conv(x, w, b)))
    w2 = _rand(rng, 4, 3, 1, 3, 3)
    got = ops.conv(Tensor(x), ConvParams(Tensor(w2), stride=(1, 2, 2), padding=(0, 1, 1))).data
    out.append(_close("oracle conv strided", got, oracles.conv(x, w2, None, (1, 2, 2), (0, 1, 1))))
    wd = _rand(rng, 3, 1, 3, 3, 3)
    got = ops.conv(Tensor(x), ConvParams(Tensor(wd), stride=2, groups=3)).data
    out.append(_close("oracle conv depthwise", got, oracles.conv(x, wd, None, (2, 2, 2), None, 3)))

    z = _rand(rng, 2, 3, 3, 3, 4) * 5
    out.append(_close("oracle sigmoid", ops.sigmoid(Tensor(z)).data, oracles.sigmoid(z)))
    out.append(_close("oracle relu", ops.relu(Tensor(z)).data, oracles.relu(z)))

    x = _rand(rng, 2, 4, 3, 3, 4)
    g = rng.uniform(0, 1, (2, 4, 1, 1, 4))
    out.append(_close("oracle gate_apply", ops.gate_apply(Tensor(x), Tensor(g)).data, oracles.gate_apply(x, g)))

    x = _rand(rng, 2, 5, 2, 2, 6)
    got = ops.temporal_shift(Tensor(x), Fraction(1, 6)).data
    out.append(_close("oracle temporal_shift", got, oracles.temporal_shift(x, 1)))

    x = _rand(rng, 2, 3, 4, 4, 3) * 2 + 1
    bn = BatchNormParams.identity(3, mode="train")
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = _rand(rng, 3)
    got = ops.batch_norm(Tensor(x), bn).data
    mean, var = oracles.batch_norm_moments(x)
    want = oracles.batch_norm(x, bn.gamma.data, bn.beta.data, mean, var, bn.eps)
    out.append(_close("oracle batch_norm train", got, want, 1e-10))

    x = _rand(rng, 1, 2, 6, 5, 3)
    out.append(_close("oracle max_pool", ops.max_pool_spatial(Tensor(x)).data, oracles.max_pool_spatial(x)))
    x = _rand(rng, 1, 1, 2, 2, 2)
    got = ops.upsample_nearest(Tensor(x), (3, 5, 4)).data
    out.append(_close("oracle upsample_nearest", got, oracles.upsample_nearest(x, (3, 5, 4))))

    for letter, kind in ECAL_KINDS.items():
        spec = make_calibrator(kind, 4, rng, use_batchnorm=True)
        _randomize_bn(spec, rng)
        spec.params["bias"].data[:] = _rand(rng, 4)
        x = _rand(rng, 1, 4, 3, 3, 4)
        out.append(_close(f"oracle {kind}", calibrate(Tensor(x), spec).data, oracles.ecal(x, spec)))

    for placement, block in (("standard", 0), ("loop", 3)):
        cfg = GCConfig(Fraction(1), placement)
        specs = make_gc_specs(cfg, 4, rng)
        for s in specs.values():
            _randomize_bn(s, rng)
        x = _rand(rng, 2, 3, 3, 3, 4)
        got = gc_forward(Tensor(x), cfg, specs, block).data
        out.append(_close(f"oracle gc_forward {placement}", got, oracles.gc_forward(x, cfg, specs, block)))
    return out


# ---------------------------------------------------------------- counting

def table_checks() -> List[Result]:
    out: List[Result] = []
    closed = True
    for p in (Fraction(1, 4), Fraction(1, 2), Fraction(1)):
        for c in (64, 128, 256, 512):
            for letter, factor in PAPER_FACTORS.items():
                closed &= ecal_param_count(letter, p, c) == factor * p * p * c * c
            closed &= ecal_param_count("GC", p, c) == p * p * c * c
    out.append(("ECal closed forms p^2 C^2", bool(closed), "p in 1/4,1/2,1; C in 64..512"))

    for p, want in TABLE_PERCENT.items():
        rows = dict(percentage_table(p))
        worst = max(abs(rows[k] - want[k]) for k in want)
        out.append((f"percentage table p={p}", worst <= 0.005, f"worst deviation {worst:.4f}pp"))

    tsn = BlockSpec("TSN", 64, 256, 1, None)
    gst = BlockSpec("GST", 64, 256, 1, None)
    out.append(("TSN block 17C^2", block_param_count(tsn) == 17 * 64 * 64, str(block_param_count(tsn))))
    gst_mid = block_param_count(gst) - 256 * 64 - 4 * 64 * 64
    out.append(("GST middle conv 6.75C^2", gst_mid == 27 * 64 * 64 // 4, str(gst_mid)))

    std = model_count(spec_from_options("TSN", p="1/2"))
    loop = model_count(spec_from_options("TSN", p="1/2", placement="loop"))
    out.append(("loop and standard counts equal", std.totals == loop.totals, f"{std.totals}"))
    return out


def enumeration_checks() -> List[Result]:
    out: List[Result] = []
    for style, p, placement in (("TSN", "1", "standard"), ("TSM", "1/2", "loop"), ("GST", "1", "loop")):
        spec = spec_from_options(style, p=p, placement=placement)
        model = build_network(spec, seed=0, dtype=np.float32)
        check = verify_against_enumeration(model, model_count(spec, with_baseline=False))
        out.append((f"enumeration {style} p={p} {placement}", check.ok, f"{check.enumerated_total:,} params"))
    return out


# -------------------------------------------------------------- structure

def structural_checks(seed: int = 1) -> List[Result]:
    rng = np.random.default_rng(seed)
    out: List[Result] = []

    ok = True
    for p in (Fraction(1, 4), Fraction(1, 2), Fraction(1)):
        cfg = GCConfig(p, "loop")
        n = cfg.period
        ok &= n == 4 / p
        ok &= all(chunk_assignment(cfg, b) == chunk_assignment(cfg, b + n) for b in range(2 * n))
        for start in range(n):
            seen = {k: {chunk_assignment(cfg, start + b)[k] for b in range(n)} for k in "GSTL"}
            ok &= all(s == set(range(n)) for s in seen.values())
    out.append(("loop period 4/p and full coverage", bool(ok), ""))

    x = _rand(rng, 2, 3, 4, 4, 8)
    out.append(("p->0 identity", gc_forward(Tensor(x), None, {}).data is x, ""))

    cfg = GCConfig(Fraction(1, 2), use_batchnorm=False)
    specs = make_gc_specs(cfg, 16, rng, init="zeros")
    x = _rand(rng, 2, 3, 4, 4, 16)
    y = gc_forward(Tensor(x), cfg, specs).data
    half = np.array_equal(y[..., :8], x[..., :8] / 2)
    passthrough = np.array_equal(y[..., 8:], x[..., 8:])
    out.append(("zero-parameter GC halves calibrated chunks", half, ""))
    out.append(("uncalibrated channels bit-exact", passthrough, ""))

    constancy = {"ECalG": (1, 2, 3), "ECalS": (1,), "ECalT": (2, 3), "ECalL": ()}
    ok, in_range = True, True
    for kind, axes in constancy.items():
        spec = make_calibrator(kind, 3, rng, use_batchnorm=True)
        x = _rand(rng, 2, 4, 5, 5, 3) * 3
        gate = ops.sigmoid(gate_logits(Tensor(x), spec)).data
        gate = np.broadcast_to(gate, x.shape)
        for a in axes:
            # bit-identical along the axis; np.var can leave a rounding residue
            ok &= bool(np.all(np.ptp(gate, axis=a) == 0))
        in_range &= bool(np.all((gate > 0) & (gate < 1)))
    out.append(("gate constancy axes", ok, ""))
    out.append(("gate values in (0,1)", in_range, ""))

    x = _rand(rng, 1, 3, 2, 2, 8)
    parts = ops.split_channels(Tensor(x), [2, 2, 2, 2])
    out.append(("split/concat roundtrip", np.array_equal(ops.concat_channels(parts).data, x), ""))
    out.append(("gate_apply g=1 identity", np.array_equal(ops.gate_apply(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 8)))).data, x), ""))
    out.append(("temporal_shift fold 0 identity", np.array_equal(ops.temporal_shift(Tensor(x), 0).data, x), ""))
    return out


SUITES: List[Callable[[], List[Result]]] = [oracle_checks, table_checks, enumeration_checks, structural_checks]


def run_selftest() -> List[Result]:
    results: List[Result] = []
    for suite in SUITES:
        try:
            results.extend(suite())
        except Exception as exc:  # a crashing suite is a failure, not an abort
            results.append((suite.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results
