"""Toy benchmark: synthetic axial-signature clips, a small trainer and gate statistics.

Eight classes, two per axial family:

==  ==============  ==================================================
0   GLOBAL_UP       whole-frame brightness ramps up over time
1   GLOBAL_DOWN     ... ramps down
2   SPATIAL_UL      static bright square in the upper-left quadrant
3   SPATIAL_LR      ... lower-right quadrant
4   TEMPORAL_LR     a patch flashes on the left, then on the right
5   TEMPORAL_RL     ... right first, then left
6   LOCAL_LEFT      a small dot drifts left
7   LOCAL_RIGHT     ... drifts right
==  ==============  ==================================================

Both members of the GLOBAL and TEMPORAL pairs contain the same set of frames,
so anything that averages over time before comparing frames cannot tell them
apart.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops, weights
from .backbone import Model, build_network, network_spec, spec_from_options
from .errors import ConfigError
from .tensor import TRAIN_DTYPE, Tensor

CLASS_NAMES = (
    "GLOBAL_UP",
    "GLOBAL_DOWN",
    "SPATIAL_UL",
    "SPATIAL_LR",
    "TEMPORAL_LR",
    "TEMPORAL_RL",
    "LOCAL_LEFT",
    "LOCAL_RIGHT",
)
FAMILIES = {"GLOBAL": (0, 1), "SPATIAL": (2, 3), "TEMPORAL": (4, 5), "LOCAL": (6, 7)}
NUM_CLASSES = 8

_SQUARE = 8  # spatial-class square side
_PATCH = 6  # temporal-class flash side
_DOT = 3  # local-class dot side
_DRIFT = 2  # pixels per frame for the local dot


@dataclass
class SyntheticClip:
    frames: np.ndarray  # [T, H, W, 1]
    label: int
    seed: int


@dataclass
class Dataset:
    clips: np.ndarray  # [N, T, H, W, 1]
    labels: np.ndarray  # [N]

    def __len__(self) -> int:
        return len(self.labels)

    def items(self) -> List[SyntheticClip]:
        return [SyntheticClip(c, int(l), i) for i, (c, l) in enumerate(zip(self.clips, self.labels))]

    def save(self, path) -> None:
        weights.save(path, {"clips": self.clips.astype(np.float32),
                            "labels": self.labels.astype(np.float64)})

    @classmethod
    def load(cls, path) -> "Dataset":
        state = weights.load(path)
        return cls(state["clips"], state["labels"].astype(np.int64))


def render_clip(label: int, rng: np.random.Generator, frames: int = 8, size: int = 32) -> np.ndarray:
    """Noise-free clip for ``label`` with values in [0, 1]."""
    t_idx = np.arange(frames)
    background = rng.uniform(0.15, 0.35)
    clip = np.full((frames, size, size), background)
    half = size // 2
    if label in (0, 1):
        start = rng.uniform(0.1, 0.3)
        levels = start + 0.5 * t_idx / max(frames - 1, 1)
        if label == 1:
            levels = levels[::-1]
        clip = np.broadcast_to(levels[:, None, None], clip.shape).copy()
    elif label in (2, 3):
        lo = 1 if label == 2 else half + 1
        r, c = rng.integers(lo, lo + half - _SQUARE - 1, size=2)
        clip[:, r : r + _SQUARE, c : c + _SQUARE] = rng.uniform(0.8, 1.0)
    elif label in (4, 5):
        # left patch in the left third, right patch in the right third, shared row band
        row = rng.integers(4, size - _PATCH - 4)
        left_col = rng.integers(2, size // 3 - _PATCH + 4)
        right_col = size - left_col - _PATCH
        level = rng.uniform(0.8, 1.0)
        first, second = (left_col, right_col) if label == 4 else (right_col, left_col)
        cut = frames // 2
        clip[:cut, row : row + _PATCH, first : first + _PATCH] = level
        clip[cut:, row : row + _PATCH, second : second + _PATCH] = level
    elif label in (6, 7):
        travel = _DRIFT * (frames - 1)
        row = rng.integers(2, size - _DOT - 2)
        col0 = rng.integers(2, size - _DOT - 2 - travel)
        step = _DRIFT if label == 7 else -_DRIFT
        if label == 6:
            col0 += travel
        level = rng.uniform(0.8, 1.0)
        for t in range(frames):
            c = col0 + step * t
            clip[t, row : row + _DOT, c : c + _DOT] = level
    else:
        raise ConfigError(f"label must be 0..7, got {label}")
    return clip[..., None]


def generate_dataset(
    K: int = NUM_CLASSES,
    n_per_class: int = 100,
    T: int = 8,
    H: int = 32,
    W: int = 32,
    noise_sigma: float = 0.05,
    seed: int = 0,
) -> Dataset:
    """Balanced, class-interleaved clips; deterministic in ``seed``."""
    if K != NUM_CLASSES:
        raise ConfigError(f"the axial dataset has exactly {NUM_CLASSES} classes, got K={K}")
    if H != W:
        raise ConfigError("clips are square")
    rng = np.random.default_rng(seed)
    n = K * n_per_class
    clips = np.empty((n, T, H, W, 1), dtype=TRAIN_DTYPE)
    labels = np.tile(np.arange(K), n_per_class)
    for i, label in enumerate(labels):
        clip = render_clip(int(label), rng, T, H)
        if noise_sigma > 0:
            clip = clip + rng.normal(0.0, noise_sigma, size=clip.shape)
        clips[i] = clip
    return Dataset(clips, labels.astype(np.int64))


def rule_classify(clip: np.ndarray) -> int:
    """Hand-written classifier for noise-free clips (the construction oracle)."""
    x = clip[..., 0]
    means = x.mean(axis=(1, 2))
    if means.max() - means.min() > 1e-6:
        return 0 if means[-1] > means[0] else 1
    background = np.median(x)
    bright = x > background + 0.2
    if np.all(bright == bright[0]):
        rows, cols = np.nonzero(bright[0])
        return 2 if cols.mean() < x.shape[2] / 2 else 3
    centroids = []
    for frame in bright:
        _, cols = np.nonzero(frame)
        centroids.append(cols.mean())
    area = bright[0].sum()
    if area > _DOT * _DOT:
        return 4 if centroids[-1] > centroids[0] else 5
    return 7 if centroids[-1] > centroids[0] else 6


# --------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 1200
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 200

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0 or self.eval_every < 1:
            raise ConfigError(f"invalid training config {self}")

    def lr_at(self, step: int) -> float:
        """Step decay by 10x at 50% and again at 75% of the run."""
        if step >= 0.75 * self.steps:
            return self.lr * 0.01
        if step >= 0.5 * self.steps:
            return self.lr * 0.1
        return self.lr


@dataclass
class TrainLog:
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)  # NaN where no eval ran

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "acc"])
        for s, l, a in zip(self.steps, self.losses, self.accuracies):
            w.writerow([s, repr(float(l)), "" if math.isnan(a) else repr(float(a))])
        return buf.getvalue()


def normalize(clips: np.ndarray) -> np.ndarray:
    return ((clips - 0.5) * 4.0).astype(TRAIN_DTYPE, copy=False)


def micro_spec(gc: str = "on", calibrators: str = "GSTL", style: str = "TSN", p="1"):
    """The toy-scale network: three bottleneck blocks, GC at every block."""
    return spec_from_options(
        style=style,
        depth="micro",
        p=p if gc == "on" else "0",
        calibrators=calibrators,
        frames=8,
        resolution=32,
        classes=NUM_CLASSES,
        in_channels=1,
    )


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    stop_at: Optional[float] = None,
) -> TrainLog:
    """SGD with momentum on softmax cross-entropy.

    With ``stop_at`` set, training ends at the first evaluation whose
    validation accuracy reaches it.
    """
    if model.spec.num_classes != NUM_CLASSES:
        raise ConfigError("model head must have 8 classes")
    rng = np.random.default_rng(cfg.seed)
    params = list(model.params.values())
    velocity = [np.zeros_like(p.data) for p in params]
    log = TrainLog()
    n = len(dataset)
    order = rng.permutation(n)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x = Tensor(normalize(dataset.clips[idx]))
        model.train()
        model.zero_grad()
        logits = model(x)
        loss = ops.softmax_cross_entropy(logits, dataset.labels[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise FloatingPointError(f"loss became {value} at step {step}")
        loss.backward()
        lr = cfg.lr_at(step)
        if lr > 0:
            for p, v in zip(params, velocity):
                g = p.grad if p.grad is not None else 0.0
                v *= cfg.momentum
                v += g + cfg.weight_decay * p.data
                p.data -= (lr * v).astype(p.data.dtype, copy=False)
        acc = float("nan")
        last = step == cfg.steps - 1
        if val is not None and ((step + 1) % cfg.eval_every == 0 or last):
            acc = evaluate(model, val)[0]
        log.steps.append(step)
        log.losses.append(value)
        log.accuracies.append(acc)
        if stop_at is not None and not math.isnan(acc) and acc >= stop_at:
            break
    model.eval()
    return log


def predict(model: Model, dataset: Dataset, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(dataset), batch_size):
        logits = model(Tensor(normalize(dataset.clips[i : i + batch_size])))
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def accuracy_from_predictions(pred: np.ndarray, labels: np.ndarray) -> Tuple[float, Dict[int, float]]:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    overall = float((pred == labels).mean()) if len(labels) else float("nan")
    per_class = {}
    for k in range(NUM_CLASSES):
        mask = labels == k
        if mask.any():
            per_class[k] = float((pred[mask] == k).mean())
    return overall, per_class


def evaluate(model: Model, dataset: Dataset) -> Tuple[float, Dict[int, float]]:
    """Top-1 accuracy overall and per class."""
    return accuracy_from_predictions(predict(model, dataset), dataset.labels)


def family_accuracy(per_class: Dict[int, float], dataset: Dataset, family: str) -> float:
    ks = FAMILIES[family]
    counts = [int((dataset.labels == k).sum()) for k in ks]
    return sum(per_class[k] * c for k, c in zip(ks, counts)) / sum(counts)


# ---------------------------------------------------------- gate statistics

@dataclass
class GateStats:
    # (site, kind) -> class -> (sum of per-clip means, number of clips)
    sums: Dict[Tuple[int, str], Dict[int, Tuple[float, int]]] = field(default_factory=dict)

    def mean(self, site: int, kind: str, cls: Optional[int] = None) -> float:
        per = self.sums[(site, kind)]
        if cls is not None:
            s, n = per[cls]
            return s / n
        total = sum(s for s, _ in per.values())
        count = sum(n for _, n in per.values())
        return total / count

    def family_mean(self, kind: str, family: str) -> float:
        """Mean logit of ``kind`` over all sites and the classes of ``family``."""
        vals = [self.mean(site, k, c) for (site, k) in self.sums if k == kind for c in FAMILIES[family]]
        return float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["site", "calibrator", "class", "mean_logit"])
        for (site, kind) in sorted(self.sums):
            for cls in sorted(self.sums[(site, kind)]):
                w.writerow([site, kind, cls, repr(self.mean(site, kind, cls))])
        return buf.getvalue()


def gate_stats(model: Model, dataset: Dataset, batch_size: int = 64) -> GateStats:
    """Per-site, per-calibrator mean pre-sigmoid gate logits, split by class.

    Each clip contributes the mean of its own logits; class means average
    those per-clip values.
    """
    model.eval()
    stats = GateStats()
    for i in range(0, len(dataset), batch_size):
        labels = dataset.labels[i : i + batch_size]

        def record(site, kind, z, labels=labels):
            per_clip = z.reshape(z.shape[0], -1).mean(axis=1)
            bucket = stats.sums.setdefault((site, kind), {})
            for cls in np.unique(labels):
                sel = per_clip[labels == cls]
                s, n = bucket.get(int(cls), (0.0, 0))
                bucket[int(cls)] = (s + float(sel.astype(np.float64).sum()), n + len(sel))

        model(Tensor(normalize(dataset.clips[i : i + batch_size])), recorder=record)
    return stats


# ------------------------------------------------------------- experiment

@dataclass
class Experiment:
    model: Model
    log: TrainLog
    train_set: Dataset
    val_set: Dataset


def run_experiment(
    gc: str = "on",
    calibrators: str = "GSTL",
    seed: int = 0,
    steps: int = 1200,
    n_train: int = 400,
    n_val: int = 100,
    noise_sigma: float = 0.05,
    **train_overrides,
) -> Experiment:
    """Generate the train/val splits for ``seed``, build the micro-net and train it.

    The splits use data seeds ``2*seed+1`` and ``2*seed+2`` so different
    seeds vary data, initialisation and batch order together.
    """
    train_set = generate_dataset(n_per_class=n_train, noise_sigma=noise_sigma, seed=2 * seed + 1)
    val_set = generate_dataset(n_per_class=n_val, noise_sigma=noise_sigma, seed=2 * seed + 2)
    model = build_network(micro_spec(gc, calibrators), seed=seed, dtype=TRAIN_DTYPE)
    cfg = TrainConfig(steps=steps, seed=seed, eval_every=max(steps // 4, 1), **train_overrides)
    log = train(model, train_set, cfg, val=val_set)
    return Experiment(model, log, train_set, val_set)
