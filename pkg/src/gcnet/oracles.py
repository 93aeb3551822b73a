"""Naive loop references for the forward kernels.

Deliberately slow and written without vectorisation so that they share no
code path with :mod:`gcnet.ops`. Inputs and outputs are plain float64 arrays.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def pool_global(x):
    n, t, h, w, c = x.shape
    out = np.zeros((n, 1, 1, 1, c))
    for b, ch in itertools.product(range(n), range(c)):
        s = 0.0
        for i, j, k in itertools.product(range(t), range(h), range(w)):
            s += x[b, i, j, k, ch]
        out[b, 0, 0, 0, ch] = s / (t * h * w)
    return out


def pool_over_time(x):
    n, t, h, w, c = x.shape
    out = np.zeros((n, 1, h, w, c))
    for b, j, k, ch in itertools.product(range(n), range(h), range(w), range(c)):
        s = 0.0
        for i in range(t):
            s += x[b, i, j, k, ch]
        out[b, 0, j, k, ch] = s / t
    return out


def pool_over_space(x):
    n, t, h, w, c = x.shape
    out = np.zeros((n, t, 1, 1, c))
    for b, i, ch in itertools.product(range(n), range(t), range(c)):
        s = 0.0
        for j, k in itertools.product(range(h), range(w)):
            s += x[b, i, j, k, ch]
        out[b, i, 0, 0, ch] = s / (h * w)
    return out


def fully_connected(x, weight, bias=None):
    n, cin = x.shape[0], x.shape[4]
    cout = weight.shape[0]
    out = np.zeros((n, 1, 1, 1, cout))
    for b, o in itertools.product(range(n), range(cout)):
        s = 0.0 if bias is None else bias[o]
        for i in range(cin):
            s += weight[o, i] * x[b, 0, 0, 0, i]
        out[b, 0, 0, 0, o] = s
    return out


def conv(x, weight, bias=None, stride=(1, 1, 1), padding=None, groups=1):
    """Cross-correlation with zero padding; ``padding=None`` means 'same' (k//2)."""
    n, t, h, w, cin = x.shape
    cout, cpg, kt, kh, kw = weight.shape
    if padding is None:
        padding = (kt // 2, kh // 2, kw // 2)
    st, sh, sw = stride
    pt, ph, pw = padding
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    opg = cout // groups
    out = np.zeros((n, to, ho, wo, cout))
    for b in range(n):
        for o in range(cout):
            g = o // opg
            for i in range(to):
                for j in range(ho):
                    for k in range(wo):
                        s = 0.0 if bias is None else bias[o]
                        for ci in range(cpg):
                            for a in range(kt):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        ti, hi, wi = i * st + a - pt, j * sh + bb - ph, k * sw + cc - pw
                                        if 0 <= ti < t and 0 <= hi < h and 0 <= wi < w:
                                            s += weight[o, ci, a, bb, cc] * x[b, ti, hi, wi, g * cpg + ci]
                        out[b, i, j, k, o] = s
    return out


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    for idx, v in np.ndenumerate(x):
        out[idx] = 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))
    return out


def gate_apply(x, g):
    expanded = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        gi = tuple(0 if g.shape[a] == 1 else idx[a] for a in range(5))
        expanded[idx] = g[gi]
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        out[idx] = x[idx] * expanded[idx]
    return out


def temporal_shift(x, fold):
    n, t, h, w, c = x.shape
    out = np.zeros_like(x)
    for b, i, j, k, ch in itertools.product(range(n), range(t), range(h), range(w), range(c)):
        if ch < fold:
            src = i - 1
        elif ch < 2 * fold:
            src = i + 1
        else:
            src = i
        if 0 <= src < t:
            out[b, i, j, k, ch] = x[b, src, j, k, ch]
    return out


def batch_norm_moments(x):
    """Two-pass per-channel mean and biased variance over all non-channel axes."""
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    m = flat.shape[0]
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        s = 0.0
        for r in range(m):
            s += flat[r, ch]
        mean[ch] = s / m
        q = 0.0
        for r in range(m):
            q += (flat[r, ch] - mean[ch]) ** 2
        var[ch] = q / m
    return mean, var


def batch_norm(x, gamma, beta, mean, var, eps=1e-5):
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        ch = idx[-1]
        out[idx] = gamma[ch] * (x[idx] - mean[ch]) / math.sqrt(var[ch] + eps) + beta[ch]
    return out


def relu(x):
    out = np.empty_like(x)
    for idx, v in np.ndenumerate(x):
        out[idx] = v if v > 0 else 0.0
    return out


def max_pool_spatial(x, kernel=3, stride=2, padding=1):
    n, t, h, w, c = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    out = np.full((n, t, ho, wo, c), -np.inf)
    for b, i, j, k, ch in itertools.product(range(n), range(t), range(ho), range(wo), range(c)):
        for a, bb in itertools.product(range(kernel), range(kernel)):
            hi, wi = j * stride + a - padding, k * stride + bb - padding
            if 0 <= hi < h and 0 <= wi < w:
                out[b, i, j, k, ch] = max(out[b, i, j, k, ch], x[b, i, hi, wi, ch])
    return out


def upsample_nearest(x, size):
    n, t, h, w, c = x.shape
    T, H, W = size
    out = np.empty((n, T, H, W, c))
    for b, i, j, k, ch in itertools.product(range(n), range(T), range(H), range(W), range(c)):
        out[b, i, j, k, ch] = x[b, i * t // T, j * h // H, k * w // W, ch]
    return out


# ------------------------------------------------------------- calibrators

def _bn_eval(z, bn):
    if bn is None:
        return z
    return batch_norm(z, bn.gamma.data, bn.beta.data, bn.running_mean, bn.running_var, bn.eps)


def ecal_logits(x, spec):
    """Pre-sigmoid gate of an ECal built from the loop references."""
    w = spec.params["weight"].data
    b = spec.params["bias"].data
    if spec.kind == "ECalG":
        z = fully_connected(pool_global(x), w, b)
    elif spec.kind == "ECalS":
        z = conv(pool_over_time(x), w, b)
    elif spec.kind == "ECalT":
        z = conv(pool_over_space(x), w, b)
    elif spec.kind == "ECalL":
        z = conv(x, w, b)
    else:
        raise ValueError(spec.kind)
    return _bn_eval(z, spec.bn)


def ecal(x, spec):
    return gate_apply(x, sigmoid(ecal_logits(x, spec)))


def gc_forward(x, cfg, specs, block_index=0):
    """Slice-wise reference: calibrator k transforms the channel range it owns."""
    out = x.copy()
    size = cfg.chunk_size(x.shape[4])
    order = list(cfg.group_order)
    n = cfg.period if cfg.placement == "loop" else 4
    for i, letter in enumerate(order):
        if letter not in specs:
            continue
        idx = (i + block_index) % n if cfg.placement == "loop" else i
        lo, hi = idx * size, (idx + 1) * size
        out[..., lo:hi] = ecal(x[..., lo:hi], specs[letter])
    return out
