"""Residual bottleneck backbones (TSN / TSM / GST) with GC insertion.

All 2D convolutions run as ``kT=1`` 3D convolutions over the whole clip, so
the three styles share one code path:

* TSN: frames are processed independently until the head averages them.
* TSM: a temporal shift on the residual branch input.
* GST: the 3x3 conv is split into a 2D path on 3/4 of the channels and a
  3x3x3 path on the remaining 1/4.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import ops
from .calibrators import (
    COMPARISON_KINDS,
    CalibratorSpec,
    GCConfig,
    calibrate,
    gc_forward,
    make_calibrator,
    make_gc_specs,
)
from .errors import ConfigError, DimensionError
from .ops import BatchNormParams, ConvParams
from .tensor import Tensor, check_activation

STYLES = ("TSN", "TSM", "GST")

DEPTHS = {
    "50": dict(stage_blocks=(3, 4, 6, 3), widths=(64, 128, 256, 512), stage_strides=(1, 2, 2, 2)),
    "101": dict(stage_blocks=(3, 4, 23, 3), widths=(64, 128, 256, 512), stage_strides=(1, 2, 2, 2)),
    # toy-scale net: one block per stage, 3x3/2 stem without pooling, every stage strided
    "micro": dict(
        stage_blocks=(1, 1, 1),
        widths=(16, 32, 64),
        stage_strides=(2, 2, 2),
        stem_channels=16,
        stem_kernel=3,
        stem_stride=2,
        stem_pool=False,
    ),
}

SiteRecorder = Callable[[int, str, np.ndarray], None]


@dataclass(frozen=True)
class BlockSpec:
    style: str
    width: int
    in_channels: int
    stride: int = 1
    site: Union[None, GCConfig, str] = None
    fold_ratio: Fraction = Fraction(1, 8)

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"unknown block style {self.style!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.style == "GST" and self.width % 4:
            raise ConfigError(f"GST needs width divisible by 4, got {self.width}")
        if isinstance(self.site, str) and self.site not in COMPARISON_KINDS:
            raise ConfigError(f"unknown comparison calibrator {self.site!r}")

    @property
    def out_channels(self) -> int:
        return 4 * self.width

    @property
    def has_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    @property
    def gst_split(self) -> Tuple[int, int]:
        """(spatial-path, spatio-temporal-path) channel counts."""
        return 3 * self.width // 4, self.width // 4


@dataclass(frozen=True)
class NetworkSpec:
    style: str = "TSN"
    depth: str = "50"
    stage_blocks: tuple = (3, 4, 6, 3)
    widths: tuple = (64, 128, 256, 512)
    stage_strides: tuple = (1, 2, 2, 2)
    stem_channels: int = 64
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_pool: bool = True
    in_channels: int = 3
    gc: Optional[GCConfig] = None
    comparison: Optional[str] = None
    insertion_mask: tuple = (True, True, True, True)
    frames: int = 8
    resolution: int = 224
    num_classes: int = 174
    fold_ratio: Fraction = Fraction(1, 8)

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"unknown style {self.style!r}")
        n = len(self.stage_blocks)
        if not (len(self.widths) == len(self.stage_strides) == n):
            raise ConfigError("stage descriptors disagree in length")
        if len(self.insertion_mask) != n:
            raise ConfigError(f"insertion mask needs {n} entries, got {len(self.insertion_mask)}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.gc is not None and self.comparison is not None:
            raise ConfigError("a network carries either GC or a comparison calibrator, not both")
        if self.comparison is not None and self.comparison not in COMPARISON_KINDS:
            raise ConfigError(f"unknown comparison calibrator {self.comparison!r}")
        if self.frames < 1 or self.resolution < 1:
            raise ConfigError("frames and resolution must be positive")

    @property
    def has_calibrators(self) -> bool:
        return self.gc is not None or self.comparison is not None

    def baseline(self) -> "NetworkSpec":
        return replace(self, gc=None, comparison=None)


def network_spec(depth: str = "50", **overrides) -> NetworkSpec:
    depth = str(depth)
    if depth not in DEPTHS:
        raise ConfigError(f"unknown depth {depth!r}; choose from {sorted(DEPTHS)}")
    geometry = dict(DEPTHS[depth])
    if "insertion_mask" not in overrides:
        geometry["insertion_mask"] = (True,) * len(geometry["stage_blocks"])
    geometry.update(overrides)
    return NetworkSpec(depth=depth, **geometry)


def iter_blocks(spec: NetworkSpec) -> Iterator[Tuple[str, BlockSpec, Optional[int]]]:
    """Yield ``(name, BlockSpec, site_index)`` in network order.

    ``site_index`` counts calibrator sites globally across stages (None when
    the block carries no calibrator).
    """
    site = 0
    in_ch = spec.stem_channels
    calibrator = spec.gc if spec.gc is not None else spec.comparison
    for s, (nb, width, stride) in enumerate(zip(spec.stage_blocks, spec.widths, spec.stage_strides)):
        for b in range(nb):
            active = calibrator is not None and spec.insertion_mask[s]
            block = BlockSpec(
                style=spec.style,
                width=width,
                in_channels=in_ch,
                stride=stride if b == 0 else 1,
                site=calibrator if active else None,
                fold_ratio=spec.fold_ratio,
            )
            yield f"stage{s + 1}.block{b}", block, (site if active else None)
            if active:
                site += 1
            in_ch = block.out_channels


def count_sites(spec: NetworkSpec) -> int:
    return sum(1 for _, _, s in iter_blocks(spec) if s is not None)


# ------------------------------------------------------------ config text

def _parse_mask(text: str) -> tuple:
    if not text or any(ch not in "01" for ch in text):
        raise ConfigError(f"mask must be a string of 0/1, got {text!r}")
    return tuple(ch == "1" for ch in text)


def parse_fraction(text) -> Fraction:
    try:
        return Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a ratio: {text!r}") from exc


def spec_from_options(
    style: str = "TSN",
    depth: str = "50",
    p="0",
    placement: str = "standard",
    mask: Optional[str] = None,
    frames: int = 8,
    resolution: int = 224,
    classes: int = 174,
    calibrators: str = "GSTL",
    comparison: Optional[str] = None,
    in_channels: int = 3,
    fold="1/8",
    batchnorm: Optional[bool] = None,
) -> NetworkSpec:
    """Build a spec from the flat options shared by the CLI and config text.

    ``p=0`` means no GC. Calibrator BatchNorm defaults on for TSN/TSM and off
    for GST.
    """
    style = style.upper()
    ratio = parse_fraction(p)
    if batchnorm is None:
        batchnorm = style != "GST"
    gc = None
    if ratio != 0:
        letters = tuple(ch for ch in "GSTL" if ch in calibrators.upper())
        if not letters or len(letters) != len(set(calibrators.upper())):
            raise ConfigError(f"calibrators must be a subset of GSTL, got {calibrators!r}")
        gc = GCConfig(p=ratio, placement=placement, enabled=letters, use_batchnorm=batchnorm)
    overrides = dict(
        style=style,
        gc=gc,
        comparison=comparison,
        frames=int(frames),
        resolution=int(resolution),
        num_classes=int(classes),
        in_channels=int(in_channels),
        fold_ratio=parse_fraction(fold),
    )
    if mask is not None:
        overrides["insertion_mask"] = _parse_mask(mask)
    spec = network_spec(depth, **overrides)
    validate_spec(spec)
    return spec


_CONFIG_KEYS = (
    "style", "depth", "p", "placement", "mask", "frames", "classes", "resolution",
    "calibrators", "comparison", "in_channels", "fold", "batchnorm",
)


def parse_config(text: str) -> NetworkSpec:
    """Parse ``key=value`` lines (``#`` starts a comment)."""
    opts: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        opts[key] = value
    if "comparison" in opts and opts["comparison"] in ("", "none"):
        opts["comparison"] = None
    if "batchnorm" in opts:
        opts["batchnorm"] = opts["batchnorm"] in ("1", "true", "on")
    return spec_from_options(**opts)


def format_config(spec: NetworkSpec) -> str:
    gc = spec.gc
    lines = [
        f"style={spec.style}",
        f"depth={spec.depth}",
        f"p={gc.p if gc else 0}",
        f"placement={gc.placement if gc else 'standard'}",
        "mask=" + "".join("1" if m else "0" for m in spec.insertion_mask),
        f"frames={spec.frames}",
        f"classes={spec.num_classes}",
        f"resolution={spec.resolution}",
        f"in_channels={spec.in_channels}",
        f"fold={spec.fold_ratio}",
    ]
    if gc is not None:
        lines.append("calibrators=" + "".join(gc.enabled))
        lines.append(f"batchnorm={int(gc.use_batchnorm)}")
    if spec.comparison:
        lines.append(f"comparison={spec.comparison}")
    return "\n".join(lines) + "\n"


def validate_spec(spec: NetworkSpec) -> None:
    for name, block, site in iter_blocks(spec):
        if isinstance(block.site, GCConfig):
            try:
                block.site.validate(block.width)
            except ConfigError as exc:
                raise ConfigError(f"{name}: {exc}") from None
        if spec.style == "TSM":
            ops.shift_fold(block.in_channels, spec.fold_ratio)


# ------------------------------------------------------------- parameters

@dataclass
class BlockParams:
    conv1: Tensor
    bn1: BatchNormParams
    bn2: BatchNormParams
    conv3: Tensor
    bn3: BatchNormParams
    conv2: Optional[Tensor] = None
    conv2s: Optional[Tensor] = None
    conv2t: Optional[Tensor] = None
    down_conv: Optional[Tensor] = None
    down_bn: Optional[BatchNormParams] = None
    calibrators: Dict[str, CalibratorSpec] = field(default_factory=dict)


def bottleneck_forward(
    x: Tensor,
    spec: BlockSpec,
    params: BlockParams,
    site_index: int = 0,
    recorder: Optional[Callable[[str, np.ndarray], None]] = None,
) -> Tensor:
    check_activation(x)
    if x.shape[4] != spec.in_channels:
        raise DimensionError(f"block expects {spec.in_channels} channels, got {x.shape[4]}")
    s = (1, spec.stride, spec.stride)
    h = ops.temporal_shift(x, spec.fold_ratio) if spec.style == "TSM" else x
    h = ops.relu(ops.batch_norm(ops.conv(h, ConvParams(params.conv1, padding=0)), params.bn1))
    if spec.style == "GST":
        spatial, temporal = ops.split_channels(h, spec.gst_split)
        spatial = ops.conv(spatial, ConvParams(params.conv2s, stride=s))
        temporal = ops.conv(temporal, ConvParams(params.conv2t, stride=s))
        h = ops.concat_channels([spatial, temporal])
    else:
        h = ops.conv(h, ConvParams(params.conv2, stride=s))
    if isinstance(spec.site, GCConfig):
        h = gc_forward(h, spec.site, params.calibrators, site_index, recorder)
    elif spec.site in ("GE3D_G", "GE3D_C", "S3DG"):
        h = calibrate(h, params.calibrators[spec.site], recorder)
    h = ops.relu(ops.batch_norm(h, params.bn2))
    h = ops.batch_norm(ops.conv(h, ConvParams(params.conv3, padding=0)), params.bn3)
    if spec.site == "SE3D":
        h = calibrate(h, params.calibrators["SE3D"], recorder)
    if spec.has_projection:
        shortcut = ops.batch_norm(
            ops.conv(x, ConvParams(params.down_conv, stride=s, padding=0)), params.down_bn
        )
    else:
        shortcut = x
    if shortcut.shape != h.shape:
        raise DimensionError(f"residual add: {h.shape} vs shortcut {shortcut.shape}")
    return ops.relu(ops.add(h, shortcut))


class Model:
    """A built network: named parameters, BatchNorm buffers and the forward pass."""

    def __init__(self, spec: NetworkSpec, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._bns: List[BatchNormParams] = []
        self.blocks: List[Tuple[str, BlockSpec, BlockParams, Optional[int]]] = []
        self.training = False

    # -- construction helpers
    def _tensor(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _bn(self, name: str, channels: int) -> BatchNormParams:
        bn = BatchNormParams.identity(channels, self.dtype)
        self._register_bn(name, bn)
        return bn

    def _register_bn(self, name: str, bn: BatchNormParams) -> None:
        bn.gamma.name, bn.beta.name = f"{name}.gamma", f"{name}.beta"
        self.params[f"{name}.gamma"] = bn.gamma
        self.params[f"{name}.beta"] = bn.beta
        self.buffers[f"{name}.running_mean"] = bn.running_mean
        self.buffers[f"{name}.running_var"] = bn.running_var
        self._bns.append(bn)

    # -- state
    def named_parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def train(self, flag: bool = True) -> "Model":
        self.training = flag
        for bn in self._bns:
            bn.mode = "train" if flag else "eval"
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: t.data for k, t in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise ConfigError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for k, t in self.params.items():
            if state[k].shape != t.data.shape:
                raise DimensionError(f"{k}: stored {state[k].shape} vs model {t.data.shape}")
            t.data = np.array(state[k], dtype=self.dtype)
        for k, buf in self.buffers.items():
            if state[k].shape != buf.shape:
                raise DimensionError(f"{k}: stored {state[k].shape} vs model {buf.shape}")
            buf[...] = state[k]

    def calibrator_sites(self) -> Dict[int, Dict[str, CalibratorSpec]]:
        return {site: bp.calibrators for _, _, bp, site in self.blocks if site is not None}

    # -- forward
    def forward(self, x: Tensor, recorder: Optional[SiteRecorder] = None) -> Tensor:
        return forward_classify(self, x, recorder)

    __call__ = forward


def _he(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float64) -> Model:
    """Allocate every parameter with seeded initialization, in network order."""
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    m = Model(spec, dtype)
    k, c0 = spec.stem_kernel, spec.stem_channels
    m._tensor("stem.conv.weight", _he(rng, (c0, spec.in_channels, 1, k, k)))
    m._bn("stem.bn", c0)
    for name, block, site in iter_blocks(spec):
        w = block.width
        conv1 = m._tensor(f"{name}.conv1.weight", _he(rng, (w, block.in_channels, 1, 1, 1)))
        bn1 = m._bn(f"{name}.bn1", w)
        bp_kwargs = {}
        if block.style == "GST":
            cs, ct = block.gst_split
            bp_kwargs["conv2s"] = m._tensor(f"{name}.conv2s.weight", _he(rng, (cs, cs, 1, 3, 3)))
            bp_kwargs["conv2t"] = m._tensor(f"{name}.conv2t.weight", _he(rng, (ct, ct, 3, 3, 3)))
        else:
            bp_kwargs["conv2"] = m._tensor(f"{name}.conv2.weight", _he(rng, (w, w, 1, 3, 3)))
        calibrators: Dict[str, CalibratorSpec] = {}
        if isinstance(block.site, GCConfig):
            calibrators = make_gc_specs(block.site, w, rng, m.dtype)
            for letter, cal in calibrators.items():
                _register_calibrator(m, f"gc.{site}.{cal.kind}", cal)
        elif isinstance(block.site, str):
            width = block.out_channels if block.site == "SE3D" else w
            cal = make_calibrator(block.site, width, rng, False, m.dtype)
            calibrators[block.site] = cal
            _register_calibrator(m, f"cal.{site}.{cal.kind}", cal)
        bn2 = m._bn(f"{name}.bn2", w)
        conv3 = m._tensor(f"{name}.conv3.weight", _he(rng, (4 * w, w, 1, 1, 1)))
        bn3 = m._bn(f"{name}.bn3", 4 * w)
        if block.has_projection:
            bp_kwargs["down_conv"] = m._tensor(
                f"{name}.downsample.conv.weight", _he(rng, (4 * w, block.in_channels, 1, 1, 1))
            )
            bp_kwargs["down_bn"] = m._bn(f"{name}.downsample.bn", 4 * w)
        bp = BlockParams(conv1=conv1, bn1=bn1, bn2=bn2, conv3=conv3, bn3=bn3,
                         calibrators=calibrators, **bp_kwargs)
        m.blocks.append((name, block, bp, site))
    final = 4 * spec.widths[-1]
    m._tensor("fc.weight", rng.normal(0.0, 0.01, size=(spec.num_classes, final)))
    m._tensor("fc.bias", np.zeros(spec.num_classes))
    return m


def _register_calibrator(m: Model, prefix: str, cal: CalibratorSpec) -> None:
    for pname, t in cal.params.items():
        t.data = t.data.astype(m.dtype)
        t.name = f"{prefix}.{pname}"
        m.params[t.name] = t
    if cal.bn is not None:
        m._register_bn(f"{prefix}.bn", cal.bn)


def forward_classify(model: Model, x: Tensor, recorder: Optional[SiteRecorder] = None) -> Tensor:
    """Clip logits ``[N, num_classes]``: averaged over time and space before the FC."""
    spec = model.spec
    check_activation(x)
    want = (spec.resolution, spec.resolution, spec.in_channels)
    if x.shape[2:] != want:
        raise DimensionError(f"input {x.shape} does not match [N,T,{want[0]},{want[1]},{want[2]}]")
    p = model.params
    bns = {bn.gamma.name[: -len(".gamma")]: bn for bn in model._bns}
    st = spec.stem_stride
    h = ops.conv(x, ConvParams(p["stem.conv.weight"], stride=(1, st, st)))
    h = ops.relu(ops.batch_norm(h, bns["stem.bn"]))
    if spec.stem_pool:
        h = ops.max_pool_spatial(h)
    for name, block, bp, site in model.blocks:
        rec = None
        if recorder is not None and site is not None:
            rec = (lambda s: lambda kind, z: recorder(s, kind, z))(site)
        h = bottleneck_forward(h, block, bp, site or 0, rec)
    h = ops.fully_connected(ops.pool_global(h), p["fc.weight"], p["fc.bias"])
    return ops.reshape(h, (h.shape[0], spec.num_classes))
