"""Differentiable neural-network operations built on :mod:`mrovseg.tensor`.

Spatial operations take channel-first ``[C, H, W]`` tensors; token
operations take ``[..., L, D]``.
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError
from .tensor import (Tensor, as_tensor, make_result, matmul, record_macs,
                     reshape, transpose)

logger = logging.getLogger(__name__)

# Additive attention sentinel. Kept finite so masked arithmetic stays finite.
MASK_SENTINEL = -1e9
LN_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))

    def _bw(g):
        s = np.empty_like(d)
        pos = d >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ez = np.exp(d[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * s,)

    return make_result(out, (x,), _bw)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d * _INV_SQRT2))
    out = (d * cdf).astype(d.dtype, copy=False)

    def _bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * d * d)
        return ((g * (cdf + d * pdf)).astype(d.dtype, copy=False),)

    return make_result(out, (x,), _bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return make_result(out, (x,), lambda g: (g * (x.data > 0),))


def _check_finite(d: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(d)):
        raise NumericError(f"{what} received non-finite input")


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), _bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), _bw)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature size {x.shape[-1]}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def _bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            n = d.shape[-1]
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), _bw)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps) ** 0.5
    return x / norm


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` shaped ``[in, out]``."""
    out = matmul(x, weight)
    return out + bias if bias is not None else out


# ---------------------------------------------------------------------------
# row gather / scatter (token <-> grid bookkeeping)
# ---------------------------------------------------------------------------

def gather_rows(x, index: np.ndarray) -> Tensor:
    """``x[index]`` along axis 0; repeated indices accumulate on backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = x.data[index]

    def _bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(out, (x,), _bw)


def scatter_mean_rows(x, index: np.ndarray, n_rows: int) -> Tensor:
    """Average rows of ``x`` into ``n_rows`` buckets given by ``index``.

    Every bucket must receive at least one row.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != (x.shape[0],):
        raise ShapeError(f"scatter index of shape {index.shape} does not match {x.shape[0]} rows")
    counts = np.bincount(index, minlength=n_rows).astype(x.dtype)
    if np.any(counts == 0):
        raise ShapeError("scatter_mean_rows left some output rows without contributions")
    acc = np.zeros((n_rows,) + x.shape[1:], dtype=x.dtype)
    np.add.at(acc, index, x.data)
    scale = (1.0 / counts).reshape((-1,) + (1,) * (x.ndim - 1))
    out = acc * scale

    def _bw(g):
        return ((g * scale)[index],)

    return make_result(out, (x,), _bw)


# ---------------------------------------------------------------------------
# convolutions and pooling on [C, H, W]
# ---------------------------------------------------------------------------

def _require_chw(x: Tensor, what: str) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{what} expects a [C, H, W] tensor, got shape {x.shape}")


def depthwise_conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel 2-D cross-correlation with zero padding."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _require_chw(x, "depthwise_conv2d")
    c, h, w = x.shape
    if kernel.ndim != 3 or kernel.shape[0] != c:
        raise ShapeError(f"depthwise kernel {kernel.shape} does not match input channels {c}")
    _, kh, kw = kernel.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    k = kernel.data
    out = np.zeros((c, oh, ow), dtype=_result_dtype(x, kernel))
    for i in range(kh):
        for j in range(kw):
            win = xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
            out += k[:, i, j, None, None] * win
    record_macs(c * oh * ow * kh * kw)

    def _bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (oh - 1) + 1:stride,
                        j:j + stride * (ow - 1) + 1:stride] += k[:, i, j, None, None] * g
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        if kernel.requires_grad:
            gk = np.empty_like(k)
            for i in range(kh):
                for j in range(kw):
                    win = xp[:, i:i + stride * (oh - 1) + 1:stride,
                             j:j + stride * (ow - 1) + 1:stride]
                    gk[:, i, j] = (g * win).sum(axis=(1, 2))
        return gx, gk

    return make_result(out, (x, kernel), _bw)


def _result_dtype(*ts: Tensor) -> np.dtype:
    return np.result_type(*[t.dtype for t in ts])


def pointwise_conv2d(x, kernel) -> Tensor:
    """1x1 channel mixing: ``kernel`` is ``[C_out, C_in]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _require_chw(x, "pointwise_conv2d")
    c, h, w = x.shape
    if kernel.ndim != 2 or kernel.shape[1] != c:
        raise ShapeError(f"pointwise kernel {kernel.shape} does not match input channels {c}")
    flat = reshape(x, (c, h * w))
    return reshape(matmul(kernel, flat), (kernel.shape[0], h, w))


def transposed_conv2d(x, kernel, stride: int = 2) -> Tensor:
    """Transposed convolution without padding.

    ``kernel`` is ``[C_in, C_out, kh, kw]``; output size is
    ``(H - 1) * stride + kh`` per axis, so the default 2x2 kernel with
    stride 2 doubles the resolution exactly.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _require_chw(x, "transposed_conv2d")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    c, h, w = x.shape
    if kernel.ndim != 4 or kernel.shape[0] != c:
        raise ShapeError(f"transposed kernel {kernel.shape} does not match input channels {c}")
    _, co, kh, kw = kernel.shape
    oh, ow = (h - 1) * stride + kh, (w - 1) * stride + kw
    # one product for every kernel tap: rows ordered (i, j, c_out)
    kk = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0)).reshape(kh * kw * co, c)
    xf = np.ascontiguousarray(x.data).reshape(c, h * w)
    taps = (kk @ xf).reshape(kh, kw, co, h, w)
    out = np.zeros((co, oh, ow), dtype=taps.dtype)
    ys, xs = stride * (h - 1) + 1, stride * (w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + ys:stride, j:j + xs:stride] += taps[i, j]
    record_macs(c * co * h * w * kh * kw)

    def _bw(g):
        gs = np.empty((kh, kw, co, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gs[i, j] = g[:, i:i + ys:stride, j:j + xs:stride]
        gs = gs.reshape(kh * kw * co, h * w)
        gx = (kk.T @ gs).reshape(c, h, w) if x.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = (gs @ xf.T).reshape(kh, kw, co, c).transpose(3, 2, 0, 1)
        return gx, gk

    return make_result(out, (x, kernel), _bw)


def _window_starts(n_in: int, n_out: int):
    starts = np.array([(i * n_in) // n_out for i in range(n_out)])
    ends = np.array([-(-((i + 1) * n_in) // n_out) for i in range(n_out)])
    return starts, ends


def _window_index(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """[n_out, kmax] indices; short windows repeat their last element."""
    kmax = int((ends - starts).max())
    idx = starts[:, None] + np.arange(kmax)[None, :]
    return np.minimum(idx, (ends - 1)[:, None])


def _window_max(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    c = x.shape[0]
    oh, kh = rows.shape
    ow, kw = cols.shape
    win = x.data[:, rows[:, :, None, None], cols[None, None, :, :]]  # [C, oh, kh, ow, kw]
    win = win.transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, kh * kw)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        src_r = rows[np.arange(oh)[None, :, None], arg // kw]
        src_c = cols[np.arange(ow)[None, None, :], arg % kw]
        ch = np.broadcast_to(np.arange(c)[:, None, None], (c, oh, ow))
        full = np.zeros_like(x.data)
        np.add.at(full, (ch, src_r, src_c), g)
        return (full,)

    return make_result(out, (x,), _bw)


def max_pool2d(x, kh: int, kw: int, stride: Optional[int] = None) -> Tensor:
    """Windowed maximum; the gradient goes to the first maximal element."""
    x = as_tensor(x)
    _require_chw(x, "max_pool2d")
    stride = stride or kh
    _, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool window {kh}x{kw} exceeds input {h}x{w}")
    oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
    rows = np.arange(oh)[:, None] * stride + np.arange(kh)[None, :]
    cols = np.arange(ow)[:, None] * stride + np.arange(kw)[None, :]
    return _window_max(x, rows, cols)


def adaptive_max_pool2d(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _require_chw(x, "adaptive_max_pool2d")
    _, h, w = x.shape
    if out_h > h or out_w > w:
        raise ShapeError(f"cannot max-pool {h}x{w} up to {out_h}x{out_w}")
    if h % out_h == 0 and w % out_w == 0:
        return _window_max(x, *_regular_windows(h, w, out_h, out_w))
    rows = _window_index(*_window_starts(h, out_h))
    cols = _window_index(*_window_starts(w, out_w))
    return _window_max(x, rows, cols)


def _regular_windows(h, w, out_h, out_w):
    kh, kw = h // out_h, w // out_w
    rows = np.arange(out_h)[:, None] * kh + np.arange(kh)[None, :]
    cols = np.arange(out_w)[:, None] * kw + np.arange(kw)[None, :]
    return rows, cols


def _avg_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    starts, ends = _window_starts(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i, (s, e) in enumerate(zip(starts, ends)):
        m[i, s:e] = 1.0 / (e - s)
    return m


def _separable(x: Tensor, ry: np.ndarray, rx: np.ndarray) -> Tensor:
    """``ry @ x[c] @ rx.T`` for every channel, differentiable in ``x``."""
    out = np.einsum("oh,chw,pw->cop", ry, x.data, rx, optimize=True)
    return make_result(out, (x,), lambda g: (np.einsum("oh,cop,pw->chw", ry, g, rx, optimize=True),))


def adaptive_avg_pool2d(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _require_chw(x, "adaptive_avg_pool2d")
    _, h, w = x.shape
    if out_h > h or out_w > w:
        raise ShapeError(f"cannot average-pool {h}x{w} up to {out_h}x{out_w}")
    return _separable(x, _avg_matrix(h, out_h, x.dtype), _avg_matrix(w, out_w, x.dtype))


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights with half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    _require_chw(x, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    return _separable(x, bilinear_matrix(h, out_h, x.dtype), bilinear_matrix(w, out_w, x.dtype))


def grid_to_chw(x) -> Tensor:
    """``[H, W, C] -> [C, H, W]``."""
    return transpose(x, (2, 0, 1))


def chw_to_grid(x) -> Tensor:
    return transpose(x, (1, 2, 0))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def split_heads(x, heads: int) -> Tensor:
    """``[L, D] -> [heads, L, D // heads]``."""
    x = as_tensor(x)
    n, d = x.shape
    if d % heads:
        raise ShapeError(f"feature size {d} not divisible by {heads} heads")
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def merge_heads(x) -> Tensor:
    h, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * dh))


def scaled_dot_attention(q, k, v, heads: int, bias=None, return_weights: bool = False):
    """Multi-head attention on already-projected ``q [N, D]``, ``k, v [M, D]``.

    ``bias`` is an additive score offset broadcastable to ``[heads, N, M]``.
    Query rows whose bias is at or below half the mask sentinel for every key
    are treated as fully masked: their weights are set uniform and the event
    is logged.
    """
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    scores = matmul(qh, transpose(kh, (0, 2, 1))) * scale
    if bias is not None:
        bias = as_tensor(bias)
        scores = scores + bias
        dead = np.all(np.broadcast_to(bias.data, scores.shape) <= MASK_SENTINEL / 2, axis=-1)
        if dead.any():
            logger.warning("%d attention rows fully masked; using uniform weights", int(dead.sum()))
            keep = Tensor(np.where(dead[..., None], 0.0, 1.0), dtype=scores.dtype)
            scores = scores * keep
    weights = softmax(scores, axis=-1)
    out = merge_heads(matmul(weights, vh))
    return (out, weights) if return_weights else out


def cross_entropy(logits, targets: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean negative log-likelihood over rows of ``logits [N, C]``."""
    logits = as_tensor(logits)
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), targets] = 1.0
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    nll = -(log_softmax(logits, axis=-1) * Tensor(onehot * w[:, None], dtype=logits.dtype)).sum()
    return nll * (1.0 / float(w.sum()))

