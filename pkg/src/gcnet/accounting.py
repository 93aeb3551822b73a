"""Analytic parameter and MAC accounting.

Two counting modes:

* ``paper``: weights only, no biases and no BatchNorm (the closed forms
  ``1/16, 9/16, 3/16, 3/16 * p^2 C^2`` per calibrator, ``17 C^2`` per block).
* ``full``: every learned element a built model owns, so the totals can be
  checked against :meth:`Model.parameter_count`.

MACs are multiply-accumulates of every conv and FC layer plus two operations
per BatchNorm output element (the convention under which a depth-50 frame at
224x224 costs about 4.11G). Each layer carries a ``kind`` so other
conventions can be recovered from the breakdown.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .backbone import BlockSpec, Model, NetworkSpec, iter_blocks
from .calibrators import ECAL_KINDS, GCConfig, GE_DEPTH, SE_REDUCTION
from .errors import ConfigError
from .ops import conv_output_extent

# closed-form share of p^2 C^2 per calibrator
PAPER_FACTORS = {
    "ECalG": Fraction(1, 16),
    "ECalS": Fraction(9, 16),
    "ECalT": Fraction(3, 16),
    "ECalL": Fraction(3, 16),
}
_KIND_ALIASES = {**{k: v for k, v in ECAL_KINDS.items()}, **{v: v for v in ECAL_KINDS.values()}}
BLOCK_PAPER_FACTOR = 17


def _kind(kind: str) -> str:
    if kind.upper() in ("GC", "TOTAL"):
        return "GC"
    try:
        return _KIND_ALIASES[kind]
    except KeyError:
        raise ConfigError(f"unknown calibrator kind {kind!r}") from None


def ecal_param_count(
    kind: str, p, channels: int, counting_mode: str = "paper", use_batchnorm: bool = True
) -> int:
    """Parameters of one calibrator (or ``kind="GC"`` for all four) at width ``channels``."""
    p = Fraction(p)
    group = p * channels / 4
    if group.denominator != 1 or group < 1:
        raise ConfigError(f"p*C = {p * channels} is not a positive multiple of 4")
    g = int(group)
    kind = _kind(kind)
    if kind == "GC":
        return sum(
            ecal_param_count(k, p, channels, counting_mode, use_batchnorm) for k in PAPER_FACTORS
        )
    weights = PAPER_FACTORS[kind] * 16 * g * g
    if counting_mode == "paper":
        return int(weights)
    if counting_mode != "full":
        raise ConfigError(f"counting_mode must be paper|full, got {counting_mode!r}")
    return int(weights) + g + (2 * g if use_batchnorm else 0)


def _middle_weights(block: BlockSpec) -> int:
    w = block.width
    if block.style == "GST":
        cs, ct = block.gst_split
        return 9 * cs * cs + 27 * ct * ct
    return 9 * w * w


def _site_params(block: BlockSpec, counting_mode: str) -> int:
    site = block.site
    if site is None:
        return 0
    if isinstance(site, GCConfig):
        return sum(
            ecal_param_count(k, site.p, block.width, counting_mode, site.use_batchnorm)
            for k in site.enabled
        )
    c = block.out_channels if site == "SE3D" else block.width
    total = 0
    for name, params, _ in _comparison_layers(site, c, (1, 1, 1)):
        if counting_mode == "paper" and name.endswith("bias"):
            continue
        total += params
    return total


def block_param_count(spec: BlockSpec, counting_mode: str = "paper") -> int:
    """Parameters of one bottleneck block including its calibrator site."""
    w = spec.width
    weights = spec.in_channels * w + _middle_weights(spec) + 4 * w * w
    if counting_mode == "paper":
        return weights + _site_params(spec, "paper")
    if counting_mode != "full":
        raise ConfigError(f"counting_mode must be paper|full, got {counting_mode!r}")
    bn = 2 * w + 2 * w + 2 * 4 * w
    proj = spec.in_channels * 4 * w + 2 * 4 * w if spec.has_projection else 0
    return weights + bn + proj + _site_params(spec, "full")


def percentage_table(p, channels: int = 64) -> List[Tuple[str, float]]:
    """Calibrator parameters as a percentage of a 17 C^2 residual block."""
    p = Fraction(p)
    block = BLOCK_PAPER_FACTOR * channels * channels
    rows = []
    for kind in PAPER_FACTORS:
        rows.append((kind, float(Fraction(100 * ecal_param_count(kind, p, channels), block))))
    rows.append(("Total", float(Fraction(100 * ecal_param_count("GC", p, channels), block))))
    return rows


def render_percentage_table(ps=(Fraction(1, 2), Fraction(1))) -> str:
    tables = [dict(percentage_table(p)) for p in ps]
    head = f"{'Block':<24}{'Params':>18}" + "".join(f"{'p=' + str(p):>12}" for p in ps)
    lines = [head, f"{'Residual block (TSN)':<24}{'17 x C^2':>18}" + "".join(f"{'100.00%':>12}" for _ in ps)]
    formulas = {"ECalG": "1/16 p^2 C^2", "ECalS": "9/16 p^2 C^2", "ECalT": "3/16 p^2 C^2",
                "ECalL": "3/16 p^2 C^2", "Total": "p^2 C^2"}
    for kind, formula in formulas.items():
        cells = "".join(f"{t[kind]:>11.2f}%" for t in tables)
        raw = "  ".join(f"{t[kind]:.6f}" for t in tables)
        lines.append(f"{kind:<24}{formula:>18}{cells}   (raw {raw})")
    return "\n".join(lines)


# ------------------------------------------------------------ model count

@dataclass
class LayerCount:
    name: str
    kind: str
    params: int
    macs: int
    extras: int = 0  # bias and BatchNorm elements inside ``params``


@dataclass
class CountReport:
    per_layer: List[LayerCount] = field(default_factory=list)
    baseline_totals: Optional[Tuple[int, int]] = None

    @property
    def params(self) -> int:
        return sum(l.params for l in self.per_layer)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.per_layer)

    @property
    def totals(self) -> Tuple[int, int]:
        return self.params, self.macs

    @property
    def overhead(self) -> Optional[Tuple[float, float]]:
        """(params %, MACs %) added relative to the baseline."""
        if self.baseline_totals is None:
            return None
        bp, bm = self.baseline_totals
        return 100.0 * (self.params - bp) / bp, 100.0 * (self.macs - bm) / bm

    def macs_by_kind(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for l in self.per_layer:
            out[l.kind] = out.get(l.kind, 0) + l.macs
        return out

    def layer_params(self) -> Dict[str, int]:
        return {l.name: l.params for l in self.per_layer if l.params}

    def render_text(self, per_layer: bool = True) -> str:
        lines = []
        if per_layer:
            width = max(len(l.name) for l in self.per_layer) + 2
            lines.append(f"{'layer':<{width}}{'kind':<8}{'params':>14}{'MACs':>18}")
            for l in self.per_layer:
                lines.append(f"{l.name:<{width}}{l.kind:<8}{l.params:>14,}{l.macs:>18,}")
            lines.append("")
        p, m = self.totals
        lines.append(f"total params: {p:,}  ({p / 1e6:.1f}M)")
        lines.append(f"total MACs (often quoted as FLOPs): {m:,}  ({m / 1e9:.1f}G)")
        kinds = self.macs_by_kind()
        lines.append(
            "MACs by kind: " + ", ".join(f"{k}={v / 1e9:.3f}G" for k, v in sorted(kinds.items()))
        )
        if self.baseline_totals is not None:
            bp, bm = self.baseline_totals
            dp, dm = self.overhead
            lines.append(f"baseline: {bp:,} params ({bp / 1e6:.1f}M), {bm:,} MACs ({bm / 1e9:.1f}G)")
            lines.append(f"overhead: params +{dp:.2f}%  MACs +{dm:.2f}%")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "macs"])
        for l in self.per_layer:
            w.writerow([l.name, l.params, l.macs])
        w.writerow(["TOTAL", self.params, self.macs])
        if self.baseline_totals is not None:
            w.writerow(["BASELINE", *self.baseline_totals])
        return buf.getvalue()


def _conv(name, cin, cout, k, out_elems, groups=1) -> LayerCount:
    per = cin // groups * k
    return LayerCount(name, "conv", cout * per, out_elems * cout * per)


def _bn(name, c, positions) -> LayerCount:
    return LayerCount(name, "bn", 2 * c, 2 * c * positions, extras=2 * c)


def _comparison_layers(kind: str, c: int, extent: Tuple[int, int, int]):
    """(param name, params, macs) triples for a full-width comparison calibrator."""
    t, h, w = extent
    if kind == "SE3D":
        r = max(c // SE_REDUCTION, 1)
        return [("fc1.weight", r * c, r * c), ("fc1.bias", r, 0),
                ("fc2.weight", c * r, c * r), ("fc2.bias", c, 0)]
    if kind == "GE3D_G":
        return []
    if kind == "GE3D_C":
        rows = []
        for i in range(GE_DEPTH):
            t, h, w = (conv_output_extent(d, 3, 2, 1) for d in (t, h, w))
            rows.append((f"dw{i}.weight", 27 * c, 27 * c * t * h * w))
            rows.append((f"dw{i}.bias", c, 0))
        return rows
    if kind == "S3DG":
        return [("weight", c * c, c * c), ("bias", c, 0)]
    raise ConfigError(f"unknown comparison calibrator {kind!r}")


def _site_layers(prefix_site: int, block: BlockSpec, t: int, h: int) -> List[LayerCount]:
    site = block.site
    rows: List[LayerCount] = []
    if isinstance(site, GCConfig):
        g = site.chunk_size(block.width)
        for letter in site.group_order:
            if letter not in site.enabled:
                continue
            kind = ECAL_KINDS[letter]
            name = f"gc.{prefix_site}.{kind}"
            weights = int(PAPER_FACTORS[kind] * 16 * g * g)
            # positions at which the gate logits are produced
            positions = {"ECalG": 1, "ECalS": h * h, "ECalT": t, "ECalL": t * h * h}[kind]
            rows.append(LayerCount(name, "fc" if kind == "ECalG" else "conv",
                                   weights + g, weights * positions, extras=g))
            if site.use_batchnorm:
                rows.append(_bn(f"{name}.bn", g, positions))
        return rows
    if isinstance(site, str):
        c = block.out_channels if site == "SE3D" else block.width
        grouped: Dict[str, LayerCount] = {}
        for pname, params, macs in _comparison_layers(site, c, (t, h, h)):
            layer = f"cal.{prefix_site}.{site}" + ("." + pname.rsplit(".", 1)[0] if "." in pname else "")
            entry = grouped.setdefault(layer, LayerCount(layer, "fc" if site != "GE3D_C" else "conv", 0, 0))
            entry.params += params
            entry.macs += macs
            if pname.endswith("bias"):
                entry.extras += params
        rows.extend(grouped.values())
    return rows


def model_count(spec: NetworkSpec, counting_mode: str = "full", with_baseline: bool = True) -> CountReport:
    """Analytic per-layer parameters and MACs for a whole network."""
    if counting_mode not in ("paper", "full"):
        raise ConfigError(f"counting_mode must be paper|full, got {counting_mode!r}")
    full = counting_mode == "full"
    t = spec.frames
    rows: List[LayerCount] = []
    k, s, c0 = spec.stem_kernel, spec.stem_stride, spec.stem_channels
    h = conv_output_extent(spec.resolution, k, s, k // 2)
    rows.append(_conv("stem.conv", spec.in_channels, c0, k * k, t * h * h))
    rows.append(_bn("stem.bn", c0, t * h * h))
    if spec.stem_pool:
        h = conv_output_extent(h, 3, 2, 1)
    for name, block, site in iter_blocks(spec):
        w, cin = block.width, block.in_channels
        h2 = conv_output_extent(h, 3, block.stride, 1)
        rows.append(_conv(f"{name}.conv1", cin, w, 1, t * h * h))
        rows.append(_bn(f"{name}.bn1", w, t * h * h))
        if block.style == "GST":
            cs, ct = block.gst_split
            rows.append(_conv(f"{name}.conv2s", cs, cs, 9, t * h2 * h2))
            rows.append(_conv(f"{name}.conv2t", ct, ct, 27, t * h2 * h2))
        else:
            rows.append(_conv(f"{name}.conv2", w, w, 9, t * h2 * h2))
        if site is not None:
            rows.extend(_site_layers(site, block, t, h2))
        rows.append(_bn(f"{name}.bn2", w, t * h2 * h2))
        rows.append(_conv(f"{name}.conv3", w, 4 * w, 1, t * h2 * h2))
        rows.append(_bn(f"{name}.bn3", 4 * w, t * h2 * h2))
        if block.has_projection:
            rows.append(_conv(f"{name}.downsample.conv", cin, 4 * w, 1, t * h2 * h2))
            rows.append(_bn(f"{name}.downsample.bn", 4 * w, t * h2 * h2))
        h = h2
    final = 4 * spec.widths[-1]
    rows.append(LayerCount("fc", "fc", final * spec.num_classes + spec.num_classes,
                           final * spec.num_classes, extras=spec.num_classes))
    if not full:
        rows = [LayerCount(r.name, r.kind, r.params - r.extras, r.macs) for r in rows]
    report = CountReport(per_layer=rows)
    if with_baseline and spec.has_calibrators:
        base = model_count(spec.baseline(), counting_mode, with_baseline=False)
        report.baseline_totals = base.totals
    return report


# ------------------------------------------------------- cross-checking

@dataclass
class EnumerationCheck:
    ok: bool
    analytic_total: int
    enumerated_total: int
    mismatches: List[Tuple[str, int, int]] = field(default_factory=list)

    def describe(self) -> str:
        if self.ok:
            return f"OK: {self.enumerated_total:,} parameters"
        rows = [f"MISMATCH: analytic {self.analytic_total:,} vs enumerated {self.enumerated_total:,}"]
        rows += [f"  {name}: analytic {a} vs enumerated {e}" for name, a, e in self.mismatches]
        return "\n".join(rows)


def enumerate_parameters(model: Model) -> Dict[str, int]:
    """Element counts of the built model grouped by layer (name minus the last field)."""
    counts: Dict[str, int] = {}
    for name, t in model.named_parameters().items():
        layer = name.rsplit(".", 1)[0]
        counts[layer] = counts.get(layer, 0) + int(t.data.size)
    return counts


def verify_against_enumeration(model: Model, report: CountReport) -> EnumerationCheck:
    analytic = report.layer_params()
    enumerated = enumerate_parameters(model)
    mismatches = []
    for name in sorted(set(analytic) | set(enumerated)):
        a, e = analytic.get(name, 0), enumerated.get(name, 0)
        if a != e:
            mismatches.append((name, a, e))
    return EnumerationCheck(
        ok=not mismatches,
        analytic_total=report.params,
        enumerated_total=sum(enumerated.values()),
        mismatches=mismatches,
    )
