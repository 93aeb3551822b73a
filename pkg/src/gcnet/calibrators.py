"""Element-wise calibrators and the group-contextualization (GC) module.

A calibrator turns some axial summary of its input into gate logits, squashes
them with a sigmoid and multiplies the input by the (expanded) gate:

* ``ECalG``: mean over (T,H,W) -> FC           gate varies over C
* ``ECalS``: mean over T -> 1x3x3 conv          gate varies over H,W,C
* ``ECalT``: mean over (H,W) -> 3x1x1 conv      gate varies over T,C
* ``ECalL``: 3x1x1 conv on the full tensor      gate varies everywhere

GC splits the channels into chunks of ``p*C/4`` and lets each of the four
calibrators own one chunk; the rest passes through untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .ops import BatchNormParams, ConvParams
from .tensor import Tensor, check_activation

ECAL_KINDS = {"G": "ECalG", "S": "ECalS", "T": "ECalT", "L": "ECalL"}
COMPARISON_KINDS = ("SE3D", "GE3D_G", "GE3D_C", "S3DG")
ALL_KINDS = tuple(ECAL_KINDS.values()) + COMPARISON_KINDS

SE_REDUCTION = 16
GE_DEPTH = 3  # strided depthwise convs in GE3D-C

Recorder = Callable[[str, np.ndarray], None]


@dataclass
class CalibratorSpec:
    kind: str
    channels: int
    params: Dict[str, Tensor] = field(default_factory=dict)
    bn: Optional[BatchNormParams] = None

    @property
    def use_batchnorm(self) -> bool:
        return self.bn is not None

    def named_tensors(self) -> Dict[str, Tensor]:
        out = dict(self.params)
        if self.bn is not None:
            out["bn.gamma"] = self.bn.gamma
            out["bn.beta"] = self.bn.beta
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {"bn.running_mean": self.bn.running_mean, "bn.running_var": self.bn.running_var}

    def set_mode(self, mode: str) -> None:
        if self.bn is not None:
            self.bn.mode = mode


def param_shapes(kind: str, channels: int) -> Dict[str, tuple]:
    """Learned tensor shapes of a calibrator (BatchNorm excluded)."""
    c = channels
    if kind == "ECalG":
        return {"weight": (c, c), "bias": (c,)}
    if kind == "ECalS":
        return {"weight": (c, c, 1, 3, 3), "bias": (c,)}
    if kind in ("ECalT", "ECalL"):
        return {"weight": (c, c, 3, 1, 1), "bias": (c,)}
    if kind == "SE3D":
        r = max(c // SE_REDUCTION, 1)
        return {"fc1.weight": (r, c), "fc1.bias": (r,), "fc2.weight": (c, r), "fc2.bias": (c,)}
    if kind == "GE3D_G":
        return {}
    if kind == "GE3D_C":
        shapes = {}
        for i in range(GE_DEPTH):
            shapes[f"dw{i}.weight"] = (c, 1, 3, 3, 3)
            shapes[f"dw{i}.bias"] = (c,)
        return shapes
    if kind == "S3DG":
        return {"weight": (c, c), "bias": (c,)}
    raise ConfigError(f"unknown calibrator kind {kind!r}")


def make_calibrator(
    kind: str,
    channels: int,
    rng: Optional[np.random.Generator] = None,
    use_batchnorm: bool = False,
    dtype=np.float64,
    init: str = "he",
) -> CalibratorSpec:
    """Allocate a calibrator. ``init="zeros"`` gives the constant-0.5 gate."""
    if kind not in ALL_KINDS:
        raise ConfigError(f"unknown calibrator kind {kind!r}")
    if channels < 1:
        raise ConfigError("calibrator needs at least one channel")
    if rng is None:
        rng = np.random.default_rng(0)
    params = {}
    for name, shape in param_shapes(kind, channels).items():
        if name.endswith("bias") or init == "zeros":
            arr = np.zeros(shape, dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    bn = None
    if use_batchnorm and kind in ECAL_KINDS.values():
        bn = BatchNormParams.identity(channels, dtype)
    return CalibratorSpec(kind=kind, channels=channels, params=params, bn=bn)


def _check(x: Tensor, spec: CalibratorSpec, kinds) -> None:
    check_activation(x)
    if spec.kind not in kinds:
        raise ConfigError(f"calibrator kind {spec.kind} not accepted here")
    if x.shape[4] != spec.channels:
        raise DimensionError(f"{spec.kind} built for {spec.channels} channels, got {x.shape[4]}")


def _maybe_bn(z: Tensor, spec: CalibratorSpec) -> Tensor:
    return ops.batch_norm(z, spec.bn) if spec.bn is not None else z


def gate_logits(x: Tensor, spec: CalibratorSpec) -> Tensor:
    """Pre-sigmoid gate for ``x``; its unit axes are the ones the gate is constant along."""
    _check(x, spec, ALL_KINDS)
    p = spec.params
    kind = spec.kind
    if kind == "ECalG":
        z = ops.fully_connected(ops.pool_global(x), p["weight"], p["bias"])
    elif kind == "ECalS":
        z = ops.conv(ops.pool_over_time(x), ConvParams(p["weight"], p["bias"]))
    elif kind == "ECalT":
        z = ops.conv(ops.pool_over_space(x), ConvParams(p["weight"], p["bias"]))
    elif kind == "ECalL":
        z = ops.conv(x, ConvParams(p["weight"], p["bias"]))
    elif kind == "SE3D":
        h = ops.relu(ops.fully_connected(ops.pool_global(x), p["fc1.weight"], p["fc1.bias"]))
        return ops.fully_connected(h, p["fc2.weight"], p["fc2.bias"])
    elif kind == "GE3D_G":
        return ops.pool_global(x)
    elif kind == "GE3D_C":
        z = x
        for i in range(GE_DEPTH):
            z = ops.conv(
                z,
                ConvParams(p[f"dw{i}.weight"], p[f"dw{i}.bias"], stride=2, groups=spec.channels),
            )
        return ops.upsample_nearest(z, x.shape[1:4])
    else:  # S3DG
        return ops.fully_connected(ops.pool_global(x), p["weight"], p["bias"])
    return _maybe_bn(z, spec)


def calibrate(x: Tensor, spec: CalibratorSpec, recorder: Optional[Recorder] = None) -> Tensor:
    z = gate_logits(x, spec)
    if recorder is not None:
        recorder(spec.kind, z.data)
    return ops.gate_apply(x, ops.sigmoid(z))


def ecal_g(x: Tensor, spec: CalibratorSpec) -> Tensor:
    _check(x, spec, ("ECalG",))
    return calibrate(x, spec)


def ecal_s(x: Tensor, spec: CalibratorSpec) -> Tensor:
    _check(x, spec, ("ECalS",))
    return calibrate(x, spec)


def ecal_t(x: Tensor, spec: CalibratorSpec) -> Tensor:
    _check(x, spec, ("ECalT",))
    return calibrate(x, spec)


def ecal_l(x: Tensor, spec: CalibratorSpec) -> Tensor:
    _check(x, spec, ("ECalL",))
    return calibrate(x, spec)


def comparison_calibrator(x: Tensor, spec: CalibratorSpec) -> Tensor:
    _check(x, spec, COMPARISON_KINDS)
    return calibrate(x, spec)


# ------------------------------------------------------------------- GC

@dataclass(frozen=True)
class GCConfig:
    """Partition ratio, calibrator ordering and chunk placement for GC sites.

    ``enabled`` selects which of the four calibrators are actually built; the
    single-calibrator ablations keep their chunk slot and leave the others
    uncalibrated.
    """

    p: Fraction = Fraction(1)
    placement: str = "standard"
    group_order: tuple = ("G", "S", "T", "L")
    enabled: tuple = ("G", "S", "T", "L")
    use_batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "p", Fraction(self.p))
        if not (0 < self.p <= 1):
            raise ConfigError(f"partition ratio must lie in (0, 1], got {self.p}")
        if self.placement not in ("standard", "loop"):
            raise ConfigError(f"placement must be standard|loop, got {self.placement!r}")
        if sorted(self.group_order) != ["G", "L", "S", "T"]:
            raise ConfigError(f"group_order must permute G,S,T,L: {self.group_order}")
        if not self.enabled or any(k not in self.group_order for k in self.enabled):
            raise ConfigError(f"bad enabled calibrators {self.enabled}")
        if self.placement == "loop" and (4 / self.p).denominator != 1:
            raise ConfigError(f"loop placement needs 4/p integral, p={self.p}")

    def chunk_size(self, channels: int) -> int:
        size = self.p * channels / 4
        if size.denominator != 1 or size < 1:
            raise ConfigError(f"p*C = {self.p * channels} is not a positive multiple of 4")
        return int(size)

    @property
    def period(self) -> int:
        """Number of chunks the loop placement rotates through."""
        return int(4 / self.p) if (4 / self.p).denominator == 1 else 4

    def layout(self, channels: int) -> list:
        """Channel extents of consecutive chunks; the first ``4`` or all ``4/p`` are calibratable."""
        size = self.chunk_size(channels)
        if self.placement == "loop":
            return [size] * self.period
        rest = channels - 4 * size
        return [size] * 4 + ([rest] if rest else [])

    def validate(self, channels: int) -> None:
        self.layout(channels)


def chunk_assignment(cfg: GCConfig, block_index: int) -> Dict[str, int]:
    """Map calibrator letter -> chunk index at the ``block_index``-th GC site."""
    if block_index < 0:
        raise ConfigError("block_index must be non-negative")
    if cfg.placement == "standard":
        return {k: i for i, k in enumerate(cfg.group_order)}
    n = cfg.period
    return {k: (i + block_index) % n for i, k in enumerate(cfg.group_order)}


def make_gc_specs(
    cfg: GCConfig,
    channels: int,
    rng: Optional[np.random.Generator] = None,
    dtype=np.float64,
    init: str = "he",
) -> Dict[str, CalibratorSpec]:
    size = cfg.chunk_size(channels)
    return {
        k: make_calibrator(ECAL_KINDS[k], size, rng, cfg.use_batchnorm, dtype, init)
        for k in cfg.group_order
        if k in cfg.enabled
    }


def gc_forward(
    x: Tensor,
    cfg: Optional[GCConfig],
    specs: Mapping[str, CalibratorSpec],
    block_index: int = 0,
    recorder: Optional[Recorder] = None,
) -> Tensor:
    """Calibrate the owned chunks of ``x``; ``cfg=None`` is the p -> 0 limit (identity)."""
    check_activation(x)
    if cfg is None:
        return x
    sizes = cfg.layout(x.shape[4])
    assign = chunk_assignment(cfg, block_index)
    owners: Dict[int, str] = {}
    for letter, spec in specs.items():
        idx = assign[letter]
        if idx in owners:
            raise AssertionError(f"chunk {idx} assigned to both {owners[idx]} and {letter}")
        if spec.channels != sizes[idx]:
            raise DimensionError(
                f"{spec.kind} built for {spec.channels} channels, chunk has {sizes[idx]}"
            )
        owners[idx] = letter
    parts = ops.split_channels(x, sizes)
    out = [
        calibrate(part, specs[owners[i]], recorder) if i in owners else part
        for i, part in enumerate(parts)
    ]
    return ops.concat_channels(out)
