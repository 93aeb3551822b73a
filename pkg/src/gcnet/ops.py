"""Differentiable kernels over ``[N, T, H, W, C]`` tensors.

Every function here takes and returns :class:`~gcnet.tensor.Tensor` and records
its own backward rule. Convolution is cross-correlation with zero padding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor, check_activation, node

Triple = tuple


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 values, got {v}")
    return v


# ---------------------------------------------------------------- pooling

def _mean_over(x: Tensor, axes: tuple) -> Tensor:
    check_activation(x)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=True)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g / count, shape).copy(),)

    return node(out, (x,), backward)


def pool_global(x: Tensor) -> Tensor:
    """Mean over time and space: ``[N,T,H,W,C] -> [N,1,1,1,C]``."""
    return _mean_over(x, (1, 2, 3))


def pool_over_time(x: Tensor) -> Tensor:
    """``[N,T,H,W,C] -> [N,1,H,W,C]``."""
    return _mean_over(x, (1,))


def pool_over_space(x: Tensor) -> Tensor:
    """``[N,T,H,W,C] -> [N,T,1,1,C]``."""
    return _mean_over(x, (2, 3))


# ------------------------------------------------------------ linear maps

def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Channel mixing on a pooled vector. ``weight`` is ``[C_out, C_in]``."""
    check_activation(x)
    if x.shape[1:4] != (1, 1, 1):
        raise DimensionError(f"fully_connected expects [N,1,1,1,C], got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[4]:
        raise DimensionError(
            f"weight {weight.shape} does not accept {x.shape[4]} input channels"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"bias {bias.shape} vs {weight.shape[0]} outputs")
    n = x.shape[0]
    xm = x.data.reshape(n, -1)
    out = xm @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, 1, 1, 1, -1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(n, -1)
        gx = (gm @ weight.data).reshape(x.shape)
        gw = gm.T @ xm
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return node(out, parents, backward)


@dataclass
class ConvParams:
    """Kernel ``[C_out, C_in/groups, kT, kH, kW]`` plus stride/padding.

    ``padding="same"`` pads ``k // 2`` on each axis and needs odd kernels.
    """

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: Union[int, Triple] = 1
    padding: Union[str, int, Triple] = "same"
    groups: int = 1

    def resolved_padding(self) -> Triple:
        k = self.kernel.shape[2:]
        if isinstance(self.padding, str):
            if self.padding != "same":
                raise ConfigError(f"unknown padding mode {self.padding!r}")
            if any(d % 2 == 0 for d in k):
                raise ConfigError(f"'same' padding needs odd kernel extents, got {k}")
            return tuple(d // 2 for d in k)
        return _triple(self.padding)


def conv_output_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv(x: Tensor, p: ConvParams) -> Tensor:
    """3D cross-correlation over (T, H, W); 2D/1D convs are kT=1 / kH=kW=1."""
    check_activation(x)
    w = p.kernel.data
    if w.ndim != 5:
        raise DimensionError(f"conv kernel must be rank 5, got {w.shape}")
    co, cig, kt, kh, kw = w.shape
    g = p.groups
    ci = x.shape[4]
    if ci % g or co % g or cig * g != ci:
        raise DimensionError(
            f"kernel {w.shape} with groups={g} does not accept {ci} input channels"
        )
    if p.bias is not None and p.bias.shape != (co,):
        raise DimensionError(f"bias {p.bias.shape} vs {co} output channels")
    st, sh, sw = _triple(p.stride)
    pt, ph, pw = p.resolved_padding()
    n, t, h, wd, _ = x.shape
    to = conv_output_extent(t, kt, st, pt)
    ho = conv_output_extent(h, kh, sh, ph)
    wo = conv_output_extent(wd, kw, sw, pw)
    if min(to, ho, wo) < 1:
        raise DimensionError(f"conv output would be empty for input {x.shape}")

    pointwise = (kt, kh, kw) == (1, 1, 1) and (pt, ph, pw) == (0, 0, 0) and g == 1
    offsets = [(i, j, k) for i in range(kt) for j in range(kh) for k in range(kw)]
    spans = (st * (to - 1) + 1, sh * (ho - 1) + 1, sw * (wo - 1) + 1)

    def window(arr, i, j, k):
        return arr[:, i : i + spans[0] : st, j : j + spans[1] : sh, k : k + spans[2] : sw, :]

    if pointwise:
        xs = x.data[:, ::st, ::sh, ::sw, :]
        w2 = w.reshape(co, ci)
        out = xs @ w2.T
    elif g == 1:
        xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
        # cols: [N, To, Ho, Wo, kT*kH*kW, Ci] with kernel offset ahead of channel
        cols = np.empty((n, to, ho, wo, len(offsets), ci), dtype=x.data.dtype)
        for idx, (i, j, k) in enumerate(offsets):
            cols[:, :, :, :, idx, :] = window(xp, i, j, k)
        cols2 = cols.reshape(-1, len(offsets) * ci)
        wmat = w.transpose(2, 3, 4, 1, 0).reshape(-1, co)
        out = (cols2 @ wmat).reshape(n, to, ho, wo, co)
    else:
        xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
        win = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
        win = win[:, ::st, ::sh, ::sw][:, :to, :ho, :wo]
        # win: [N, To, Ho, Wo, Ci, kT, kH, kW]
        wg = win.reshape(n, to, ho, wo, g, cig, kt, kh, kw)
        kg = w.reshape(g, co // g, cig, kt, kh, kw)
        out = np.einsum("nthwgiabc,goiabc->nthwgo", wg, kg, optimize=True)
        out = out.reshape(n, to, ho, wo, co)
    if p.bias is not None:
        out += p.bias.data
    parents = [x, p.kernel] + ([p.bias] if p.bias is not None else [])

    def backward(gout):
        if pointwise:
            g2 = gout.reshape(-1, co)
            gw = (g2.T @ xs.reshape(-1, ci)).reshape(w.shape)
            gxs = gout @ w2
            if (st, sh, sw) == (1, 1, 1):
                gx = gxs
            else:
                gx = np.zeros_like(x.data)
                gx[:, ::st, ::sh, ::sw, :] = gxs
        elif g == 1:
            g2 = gout.reshape(-1, co)
            gw = (cols2.T @ g2).reshape(kt, kh, kw, ci, co).transpose(4, 3, 0, 1, 2)
            gcols = (g2 @ wmat.T).reshape(n, to, ho, wo, len(offsets), ci)
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for idx, (i, j, k) in enumerate(offsets):
                window(gxp, i, j, k)[...] += gcols[:, :, :, :, idx, :]
            gx = gxp[:, pt : pt + t, ph : ph + h, pw : pw + wd, :]
        else:
            go = gout.reshape(n, to, ho, wo, g, co // g)
            gw = np.einsum("nthwgo,nthwgiabc->goiabc", go, wg, optimize=True).reshape(w.shape)
            gcols = np.einsum("nthwgo,goiabc->nthwgiabc", go, kg, optimize=True)
            gcols = gcols.reshape(n, to, ho, wo, ci, kt, kh, kw)
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i, j, k in offsets:
                window(gxp, i, j, k)[...] += gcols[..., i, j, k]
            gx = gxp[:, pt : pt + t, ph : ph + h, pw : pw + wd, :]
        grads = [np.ascontiguousarray(gx), np.ascontiguousarray(gw)]
        if p.bias is not None:
            grads.append(gout.reshape(-1, co).sum(axis=0))
        return tuple(grads)

    return node(out, parents, backward)


# ---------------------------------------------------------- nonlinearities

def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)

    def backward(g):
        return (g * out * (1.0 - out),)

    return node(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = out > 0

    def backward(g):
        return (g * mask,)

    return node(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")

    def backward(g):
        return g, g

    return node(a.data + b.data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return node(x.data * factor, (x,), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return node(x.data.reshape(shape), (x,), backward)


# ----------------------------------------------------------------- gating

def gate_apply(x: Tensor, g: Tensor) -> Tensor:
    """Expand ``g`` along its unit axes and multiply element-wise with ``x``."""
    check_activation(x)
    check_activation(g, "gate")
    for gd, xd in zip(g.shape, x.shape):
        if gd != 1 and gd != xd:
            raise DimensionError(f"gate {g.shape} cannot expand to {x.shape}")
    axes = tuple(i for i, (gd, xd) in enumerate(zip(g.shape, x.shape)) if gd == 1 and xd != 1)
    out = x.data * g.data

    def backward(gout):
        gx = gout * g.data
        gg = (gout * x.data).sum(axis=axes, keepdims=True) if axes else gout * x.data
        return gx, gg

    return node(out, (x, g), backward)


# ------------------------------------------------------- channel routing

def split_channels(x: Tensor, sizes: Sequence[int]) -> list:
    check_activation(x)
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[4] or any(s < 0 for s in sizes):
        raise DimensionError(f"split sizes {sizes} do not sum to {x.shape[4]} channels")
    parts = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def backward(g, lo=lo, hi=hi):
            gx = np.zeros_like(x.data)
            gx[..., lo:hi] = g
            return (gx,)

        parts.append(node(x.data[..., lo:hi], (x,), backward))
        start = hi
    return parts


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [p for p in parts if p.shape[4] > 0] or list(parts[:1])
    if not parts:
        raise DimensionError("nothing to concatenate")
    lead = parts[0].shape[:4]
    for p in parts:
        check_activation(p, "part")
        if p.shape[:4] != lead:
            raise DimensionError(f"concat parts disagree on N,T,H,W: {lead} vs {p.shape[:4]}")
    bounds = np.cumsum([0] + [p.shape[4] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=4)

    def backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return node(out, tuple(parts), backward)


# ---------------------------------------------------------- temporal ops

def shift_fold(channels: int, fold_ratio) -> int:
    fold = int(Fraction(fold_ratio) * channels)  # floor for non-negative ratios
    if fold < 0 or 2 * fold > channels:
        raise ConfigError(f"fold_ratio {fold_ratio} gives fold {fold} for {channels} channels")
    return fold


def _shift(a: np.ndarray, fold: int, forward: bool) -> np.ndarray:
    out = a.copy()
    if fold == 0:
        return out
    lo, mid = slice(0, fold), slice(fold, 2 * fold)
    first, second = (lo, mid) if forward else (mid, lo)
    # first group: y[t] = x[t-1]; second group: y[t] = x[t+1]
    out[:, :, ..., first] = 0
    out[:, 1:, ..., first] = a[:, :-1, ..., first]
    out[:, :, ..., second] = 0
    out[:, :-1, ..., second] = a[:, 1:, ..., second]
    return out


def temporal_shift(x: Tensor, fold_ratio=Fraction(1, 8)) -> Tensor:
    """Parameter-free shift of ``fold`` channels forward and ``fold`` backward in time."""
    check_activation(x)
    fold = shift_fold(x.shape[4], fold_ratio)
    out = _shift(x.data, fold, forward=True)

    def backward(g):
        return (_shift(g, fold, forward=False),)

    return node(out, (x,), backward)


# ---------------------------------------------------------- normalization

@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "eval"

    @classmethod
    def identity(cls, channels: int, dtype=np.float64, mode: str = "eval") -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            mode=mode,
        )


def batch_norm(x: Tensor, p: BatchNormParams) -> Tensor:
    """Per-channel normalization over (N, T, H, W) followed by ``gamma, beta``."""
    check_activation(x)
    c = x.shape[4]
    if p.gamma.shape != (c,) or p.beta.shape != (c,):
        raise DimensionError(f"batch_norm params sized {p.gamma.shape} for {c} channels")
    gamma = p.gamma.data
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if p.mode == "train":
        mean = x2.sum(axis=0) / m
        centered = x2 - mean
        var = np.einsum("ij,ij->j", centered, centered) / m
        inv = 1.0 / np.sqrt(var + p.eps)
        unbiased = var * m / max(m - 1, 1)
        p.running_mean *= 1 - p.momentum
        p.running_mean += p.momentum * mean
        p.running_var *= 1 - p.momentum
        p.running_var += p.momentum * unbiased

        def backward(g):
            g2 = g.reshape(-1, c)
            gb = g2.sum(axis=0)
            gg = np.einsum("ij,ij->j", g2, centered) * inv
            a = gamma * inv
            gx = g2 * a + centered * (-a * inv * gg / m) - a * gb / m
            return gx.reshape(x.shape), gg, gb

    elif p.mode == "eval":
        mean = p.running_mean
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        centered = x2 - mean

        def backward(g):
            g2 = g.reshape(-1, c)
            gg = np.einsum("ij,ij->j", g2, centered) * inv
            return g * (gamma * inv), gg, g2.sum(axis=0)

    else:
        raise ConfigError(f"batch_norm mode must be train|eval, got {p.mode!r}")
    out = centered * (gamma * inv) + p.beta.data
    out = out.reshape(x.shape).astype(x.dtype, copy=False)
    return node(out, (x, p.gamma, p.beta), backward)


# ------------------------------------------------------------- resampling

def max_pool_spatial(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Per-frame max pooling (the residual-network stem pool)."""
    check_activation(x)
    n, t, h, w, c = x.shape
    xp = np.pad(
        x.data,
        ((0, 0), (0, 0), (padding, padding), (padding, padding), (0, 0)),
        constant_values=-np.inf,
    )
    ho = conv_output_extent(h, kernel, stride, padding)
    wo = conv_output_extent(w, kernel, stride, padding)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, t, ho, wo, c, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=x.data.dtype)
        di, dj = np.divmod(arg, kernel)
        nn, tt, ii, jj, cc = np.indices(arg.shape, sparse=True)
        np.add.at(gxp, (nn, tt, ii * stride + di, jj * stride + dj, cc), g)
        return (gxp[:, :, padding : padding + h, padding : padding + w, :],)

    return node(out, (x,), backward)


def upsample_nearest(x: Tensor, size: Triple) -> Tensor:
    """Nearest-neighbour resize of (T, H, W) to ``size``."""
    check_activation(x)
    idx = [np.arange(s) * x.shape[a + 1] // s for a, s in enumerate(size)]
    out = x.data[:, idx[0]][:, :, idx[1]][:, :, :, idx[2]]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]), g)
        return (gx,)

    return node(out, (x,), backward)


# ------------------------------------------------------------------- loss

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``[N, K]`` logits against integer labels."""
    z = logits.data.reshape(logits.shape[0], -1)
    n = z.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} vs {n} logits rows")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((g * d / n).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
