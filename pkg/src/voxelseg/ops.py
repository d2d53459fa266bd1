"""Differentiable volumetric network primitives.

All operations take and return :class:`~voxelseg.tensor.Tensor` values with
layout ``(N, C, D, H, W)`` and register their backward pass on the global
tape.  Convolutions are computed as im2col + GEMM; the column buffer is kept
for the weight gradient.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record

BCE_EPS = 1e-7


class BatchNormState:
    """Per-channel running statistics plus the train/eval switch."""

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {momentum}")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self.mode = "train"


def _same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "same", stride: int = 1) -> Tensor:
    """3D cross-correlation over (D, H, W).

    `same` keeps spatial extents at stride 1 and requires odd kernels; with a
    larger stride each extent becomes ceil(extent/stride), zero-padded as
    evenly as possible with the extra voxel trailing.  `valid` shrinks each
    extent by kernel−1.  Differentiable w.r.t. input, weight and bias.
    """
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ValueError(f"conv3d expects 5D input/weight, got {x.data.shape} and {weight.data.shape}")
    n, cin, d, h, w = x.data.shape
    cout, cin_w, kd, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(
            f"conv3d: input has {cin} channels (shape {x.data.shape}) but weight expects "
            f"{cin_w} (shape {weight.data.shape})")
    if padding == "same":
        if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv3d same-padding requires odd kernel extents, got {(kd, kh, kw)}")
        pads = [_same_padding(e, k, stride) for e, k in zip((d, h, w), (kd, kh, kw))]
    elif padding == "valid":
        if kd > d or kh > h or kw > w:
            raise ValueError(f"conv3d valid: kernel {(kd, kh, kw)} exceeds input {(d, h, w)}")
        pads = [(0, 0), (0, 0), (0, 0)]
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads) if any(p != (0, 0) for p in pads) else x.data
    windows = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    if stride != 1:
        windows = windows[:, :, ::stride, ::stride, ::stride]
    od, oh, ow = windows.shape[2:5]
    # (n, od, oh, ow, cin*kd*kh*kw), contiguous copy feeding the GEMM
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols = cols.reshape(n * od * oh * ow, cin * kd * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out_flat = cols @ wmat.T
    if bias is not None:
        out_flat += bias.data
    out = Tensor(out_flat.reshape(n, od, oh, ow, cout).transpose(0, 4, 1, 2, 3))

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        dbias = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        dweight = (gm.T @ cols).reshape(weight.data.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, od, oh, ow, cin, kd, kh, kw)
            dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
            dxp = np.zeros_like(xp)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        dxp[:, :,
                            i:i + stride * od:stride,
                            j:j + stride * oh:stride,
                            k:k + stride * ow:stride] += dcols[..., i, j, k]
            (pd, _), (ph, _), (pw, _) = pads
            dx = dxp[:, :, pd:pd + d, ph:ph + h, pw:pw + w]
        grads = [dx, dweight]
        if bias is not None:
            grads.append(dbias)
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv3d", inputs, out, bw)


def conv_transpose3d(x: Tensor, weight: Tensor, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution with a 2x2x2 kernel: each input voxel
    scatters ``value * kernel`` into its own 2x2x2 output block, exactly
    doubling every spatial extent."""
    n, c, d, h, w = x.data.shape
    c_w, cout, kd, kh, kw = weight.data.shape
    if (kd, kh, kw) != (stride, stride, stride) or stride != 2:
        raise ValueError(f"conv_transpose3d supports kernel 2x2x2 at stride 2 only, got kernel {(kd, kh, kw)} stride {stride}")
    if c != c_w:
        raise ValueError(f"conv_transpose3d: input has {c} channels but weight expects {c_w}")
    if min(d, h, w) < 1:
        raise ValueError(f"conv_transpose3d: non-positive spatial extents {(d, h, w)}")

    xm = np.ascontiguousarray(x.data.transpose(0, 2, 3, 4, 1)).reshape(-1, c)
    wmat = weight.data.reshape(c, cout * 8)
    prod = (xm @ wmat).reshape(n, d, h, w, cout, 2, 2, 2)
    out = Tensor(prod.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(n, cout, 2 * d, 2 * h, 2 * w))

    def bw(g):
        gm = g.reshape(n, cout, d, 2, h, 2, w, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7)
        gm = np.ascontiguousarray(gm).reshape(-1, cout * 8)
        dx = None
        if x.requires_grad:
            dx = (gm @ wmat.T).reshape(n, d, h, w, c).transpose(0, 4, 1, 2, 3)
        dw = (xm.T @ gm).reshape(weight.data.shape) if weight.requires_grad else None
        return dx, dw

    return record("conv_transpose3d", (x, weight), out, bw)


def maxpool3d(x: Tensor, window: int = 2) -> Tensor:
    """2x2x2 max pooling; gradient flows to the first maximum in scan order."""
    if window != 2:
        raise ValueError("maxpool3d supports window 2 only")
    n, c, d, h, w = x.data.shape
    for name, extent in (("D", d), ("H", h), ("W", w)):
        if extent % 2 != 0:
            raise ValueError(f"maxpool3d requires even extents, axis {name} has {extent}")
    d2, h2, w2 = d // 2, h // 2, w // 2
    blocks = x.data.reshape(n, c, d2, 2, h2, 2, w2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d2, h2, w2, 8)
    argmax = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0])

    def bw(g):
        dblocks = np.zeros((n, c, d2, h2, w2, 8), dtype=g.dtype)
        np.put_along_axis(dblocks, argmax[..., None], g[..., None], axis=-1)
        dx = dblocks.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (dx.reshape(n, c, d, h, w),)

    return record("maxpool3d", (x,), out, bw)


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel batch normalization over (N, D, H, W).

    Train mode normalizes with batch statistics and updates the running
    estimates with ``state.momentum``; eval mode is a pure function of the
    running statistics.
    """
    if x.data.ndim != 5:
        raise ValueError(f"batchnorm3d expects a 5D (N,C,D,H,W) tensor, got {x.data.shape}")
    if state.mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {state.mode!r} (want train or eval)")
    n, c, d, h, w = x.data.shape
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.size != c:
            raise ValueError(f"{name} has {t.data.size} entries for {c} channels")
    if state.running_mean.size != c:
        raise ValueError(f"state holds {state.running_mean.size} channels, input has {c}")
    axes = (0, 2, 3, 4)
    cshape = (1, c, 1, 1, 1)
    g = gamma.data.reshape(cshape)
    b = beta.data.reshape(cshape)
    if state.mode == "train":
        m = n * d * h * w
        if m < 2:
            raise ValueError(f"batchnorm3d train mode needs at least 2 values per channel, got {m}")
        mean = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (x.data - mean) * inv_std
        mom = state.momentum
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean.reshape(c)).astype(state.running_mean.dtype)
        unbiased = var.reshape(c) * (m / (m - 1))
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)

        def bw(grad):
            dbeta = grad.sum(axis=axes) if beta.requires_grad else None
            dgamma = (grad * xhat).sum(axis=axes) if gamma.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = grad * g
                dx = inv_std / m * (m * dxhat
                                    - dxhat.sum(axis=axes, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx, dgamma, dbeta
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + state.epsilon)).reshape(cshape)
        xhat = (x.data - state.running_mean.reshape(cshape)) * inv_std

        def bw(grad):
            dbeta = grad.sum(axis=axes) if beta.requires_grad else None
            dgamma = (grad * xhat).sum(axis=axes) if gamma.requires_grad else None
            dx = grad * g * inv_std if x.requires_grad else None
            return dx, dgamma, dbeta

    out = Tensor(g * xhat + b)
    return record("batchnorm3d", (x, gamma, beta), out, bw)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0
    return record("relu", (x,), out, lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, x.data.dtype.type(1), x.data.dtype.type(slope))
    out = Tensor(x.data * factor)
    return record("leaky_relu", (x,), out, lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically safe logistic; outputs are nudged strictly inside (0, 1)."""
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)
    info = np.finfo(x.data.dtype)
    np.clip(s, info.tiny, 1.0 - info.eps, out=s)
    out = Tensor(s)
    return record("sigmoid", (x,), out, lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def bce_loss(q: Tensor, p: Tensor) -> Tensor:
    """Mean binary cross-entropy over all voxels; supports soft targets.

    Predictions are clamped into [BCE_EPS, 1-BCE_EPS] before the logs; the
    gradient is zero where the clamp is active.
    """
    if q.data.shape != p.data.shape:
        raise ValueError(f"bce_loss: prediction shape {q.data.shape} != target shape {p.data.shape}")
    eps = q.data.dtype.type(BCE_EPS)
    qc = np.clip(q.data, eps, 1 - eps)
    n = q.data.size
    loss = -np.mean(p.data * np.log(qc) + (1 - p.data) * np.log1p(-qc), dtype=np.float64)
    out = Tensor(loss)

    def bw(g):
        dq = None
        if q.requires_grad:
            inside = (q.data >= eps) & (q.data <= 1 - eps)
            dq = g.reshape(()) * inside * (qc - p.data) / (qc * (1 - qc) * n)
            dq = dq.astype(q.data.dtype)
        return dq, None

    return record("bce_loss", (q, p), out, bw)


def pad_reflect3d(x: Tensor, pads) -> Tensor:
    """Reflection-pad the three spatial axes; ``pads`` is ((d0,d1),(h0,h1),(w0,w1)).

    Mirror convention excludes the edge voxel (position −1 maps to +1), so
    each pad must be at most extent−1.
    """
    pads = tuple((int(a), int(b)) for a, b in pads)
    for (a, b), extent in zip(pads, x.data.shape[2:]):
        if a < 0 or b < 0 or max(a, b) > extent - 1:
            raise ValueError(f"reflect pad {(a, b)} too large for extent {extent}")
    out = Tensor(np.pad(x.data, [(0, 0), (0, 0), *pads], mode="reflect"))

    def bw(g):
        if not x.requires_grad:
            return (None,)
        for axis, (before, after) in enumerate(pads, start=2):
            n = g.shape[axis] - before - after
            core = np.ascontiguousarray(np.take(g, range(before, before + n), axis=axis))
            for i in range(before):
                dst = [slice(None)] * core.ndim
                dst[axis] = before - i
                core[tuple(dst)] += np.take(g, i, axis=axis)
            for i in range(after):
                dst = [slice(None)] * core.ndim
                dst[axis] = n - 2 - i
                core[tuple(dst)] += np.take(g, before + n + i, axis=axis)
            g = core
        return (g,)

    return record("pad_reflect3d", (x,), out, bw)


def crop3d(x: Tensor, d_range, h_range, w_range) -> Tensor:
    """Keep spatial ranges [d0:d1], [h0:h1], [w0:w1]; backward zero-fills the rest."""
    d0, d1 = d_range
    h0, h1 = h_range
    w0, w1 = w_range
    for axis, (lo, hi), extent in zip("dhw", (d_range, h_range, w_range), x.data.shape[2:]):
        if not 0 <= lo < hi <= extent:
            raise ValueError(f"crop range ({lo},{hi}) invalid for {axis} extent {extent}")
    out = Tensor(x.data[:, :, d0:d1, h0:h1, w0:w1].copy())

    def bw(g):
        if not x.requires_grad:
            return (None,)
        dx = np.zeros_like(x.data)
        dx[:, :, d0:d1, h0:h1, w0:w1] = g
        return (dx,)

    return record("crop3d", (x,), out, bw)
