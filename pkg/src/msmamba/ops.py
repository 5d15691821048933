"""Differentiable operations over ``Tensor``.

Convolutions run as im2col + GEMM on pre-padded inputs; padding is its own
op so every conv backward stays a plain valid-mode correlation. FFTs keep
real and imaginary parts as separate real tensors so the tape never holds
complex data.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractViolation, Tensor, as_tensor, record, unbroadcast


def _coerce_pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.dtype != b.dtype:
            raise ContractViolation(f"mixed dtypes {a.dtype} vs {b.dtype}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    return Tensor(np.asarray(a, dtype=b.dtype)), b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bwd(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def bwd(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def bwd(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record("div", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    # subgradient at 0 is 0: strict inequality
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return record("relu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (a,), out, bwd)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(np.zeros((), dtype=a.dtype), a.data)
    sig = _expit(a.data)

    def bwd(g):
        return (g * sig,)

    return record("softplus", (a,), out, bwd)


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return record("exp", (a,), out, bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * (0.5 / out),)

    return record("sqrt", (a,), out, bwd)


def abs_(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return record("abs", (a,), out, bwd)


def sin(a: Tensor) -> Tensor:
    c = np.cos(a.data)
    return record("sin", (a,), np.sin(a.data), lambda g: (g * c,))


def cos(a: Tensor) -> Tensor:
    s = np.sin(a.data)
    return record("cos", (a,), np.cos(a.data), lambda g: (g * (-s),))


ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name over the core elementwise family."""
    if op not in ELEMENTWISE:
        raise ContractViolation(f"unknown elementwise op {op!r}")
    return ELEMENTWISE[op](*operands)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True),)

    return record("sum", (a,), out, bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def bwd(g):
        if axis is None:
            g2 = g
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
        full = np.broadcast_to(g2, a.shape).astype(a.dtype, copy=True)
        full /= count
        return (full,)

    return record("mean", (a,), out, bwd)


def max_along(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; ties route the gradient to the first maximum."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), g2, axis=axis)
        return (full,)

    return record("max_along", (a,), out, bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return record("reshape", (a,), out, bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    # the Tensor constructor materializes the view exactly once
    out = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record("transpose", (a,), out, bwd)


def flip(a: Tensor, axis) -> Tensor:
    out = np.flip(a.data, axis=axis)

    def bwd(g):
        return (np.ascontiguousarray(np.flip(g, axis=axis)),)

    return record("flip", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), out, bwd)


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (no fancy indexing); backward scatters into zeros."""
    out = np.ascontiguousarray(a.data[key])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return record("slice", (a,), out, bwd)


# ---------------------------------------------------------------------------
# spatial padding (last two axes of NCHW)
# ---------------------------------------------------------------------------


def _reflect_index(n: int, lo: int, hi: int) -> np.ndarray:
    if n == 1:
        return np.zeros(n + lo + hi, dtype=np.intp)
    if lo >= n or hi >= n:
        raise ContractViolation(f"reflect pad ({lo},{hi}) too large for size {n}")
    idx = np.arange(-lo, n + hi)
    idx = np.abs(idx)
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
    return idx.astype(np.intp)


def pad2d(a: Tensor, pad: tuple, mode: str = "reflect") -> Tensor:
    """Pad the last two axes by (top, bottom, left, right)."""
    pt, pb, pl, pr = pad
    if pt == pb == pl == pr == 0:
        return a
    H, W = a.shape[-2], a.shape[-1]
    if mode == "zero":
        width = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
        out = np.pad(a.data, width)

        def bwd_zero(g):
            return (np.ascontiguousarray(g[..., pt : pt + H, pl : pl + W]),)

        return record("pad_zero", (a,), out, bwd_zero)
    if mode != "reflect":
        raise ContractViolation(f"unknown padding mode {mode!r}")

    ih = _reflect_index(H, pt, pb)
    iw = _reflect_index(W, pl, pr)
    out = a.data[..., ih, :][..., :, iw]

    def bwd_reflect(g):
        # scatter columns first (inverse of the second gather), then rows
        acc_w = np.ascontiguousarray(g[..., pl : pl + W])
        for j in range(pl):
            acc_w[..., iw[j]] += g[..., j]
        for j in range(pl + W, pl + W + pr):
            acc_w[..., iw[j]] += g[..., j]
        acc = np.ascontiguousarray(acc_w[..., pt : pt + H, :])
        for i in range(pt):
            acc[..., ih[i], :] += acc_w[..., i, :]
        for i in range(pt + H, pt + H + pb):
            acc[..., ih[i], :] += acc_w[..., i, :]
        return (acc,)

    return record("pad_reflect", (a,), out, bwd_reflect)


# ---------------------------------------------------------------------------
# matmul / linear
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``y[..., o] = sum_i x[..., i] * weight[o, i] (+ bias[o])``."""
    if x.shape[-1] != weight.shape[1]:
        raise ContractViolation(
            f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx = g @ weight.data
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("linear", inputs, out, bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [B,C,H,W] -> [B, Ho*Wo, C*k*k]
    view = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = view.shape[:4]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho * Wo, C * k * k)
    return np.ascontiguousarray(cols), Ho, Wo


def _dilate(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    B, O, Ho, Wo = g.shape
    z = np.zeros((B, O, stride * (Ho - 1) + 1, stride * (Wo - 1) + 1), dtype=g.dtype)
    z[:, :, ::stride, ::stride] = g
    return z


def _conv_valid_raw(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    cols, Ho, Wo = _im2col(x, w.shape[2], stride)
    O = w.shape[0]
    y = cols @ w.reshape(O, -1).T
    return y.transpose(0, 2, 1).reshape(x.shape[0], O, Ho, Wo)


def _conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    # pointwise conv is a channel GEMM; skip im2col entirely
    B, C, H, W = x.shape
    O = weight.shape[0]
    w2 = weight.data.reshape(O, C)
    y = np.tensordot(w2, x.data, axes=([1], [1]))  # [O, B, H, W]
    out = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx = np.tensordot(w2.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3])).reshape(O, C, 1, 1)
        if bias is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return record("conv1x1", inputs, out, bwd)


def conv2d_valid(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Valid-mode cross-correlation, stride 1 or 2; pad beforehand with pad2d."""
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ContractViolation(f"kernel must be square and odd, got {kh}x{kw}")
    if Cw != C:
        raise ContractViolation(f"conv2d: input channels {C} != weight channels {Cw}")
    if stride not in (1, 2):
        raise ContractViolation(f"stride must be 1 or 2, got {stride}")
    if kh == 1 and stride == 1:
        return _conv1x1(x, weight, bias)
    k = kh
    cols, Ho, Wo = _im2col(x.data, k, stride)
    y = cols @ weight.data.reshape(O, -1).T  # [B, HoWo, O]
    if bias is not None:
        y = y + bias.data
    out = np.ascontiguousarray(y.transpose(0, 2, 1).reshape(B, O, Ho, Wo))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(B, O, Ho * Wo).transpose(0, 2, 1))  # [B,HoWo,O]
        gw = (
            g2.reshape(-1, O).T @ cols.reshape(-1, C * k * k)
        ).reshape(O, C, k, k)
        if stride == 1:
            # scatter each tap's contribution back onto the input window it read
            contrib = (g2 @ weight.data.reshape(O, -1)).reshape(B, Ho, Wo, C, k, k)
            gx = np.zeros((B, C, H, W), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i : i + Ho, j : j + Wo] += contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        else:
            # input grad: full correlation of the dilated output grad with the
            # flipped, io-swapped kernel; uncovered tail rows/cols get zero
            gd = _dilate(g, stride)
            gd = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            w_flip = np.ascontiguousarray(weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = _conv_valid_raw(gd, w_flip, 1)
            cov_h, cov_w = gx.shape[2], gx.shape[3]
            if cov_h != H or cov_w != W:
                gx = np.pad(gx, ((0, 0), (0, 0), (0, H - cov_h), (0, W - cov_w)))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("conv2d", inputs, out, bwd)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "reflect",
) -> Tensor:
    """Same-size (stride 1) / downsampling (stride 2) convolution.

    ``padding`` is "reflect" or "zero"; the pad width is k//2 on every side.
    """
    k = weight.shape[2]
    p = k // 2
    xp = pad2d(x, (p, p, p, p), mode=padding) if p else x
    return conv2d_valid(xp, weight, bias, stride)


def depthwise_conv2d_valid(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    B, C, H, W = x.shape
    Cw, one, kh, kw = weight.shape
    if Cw != C or one != 1:
        raise ContractViolation(
            f"depthwise weight must be [{C},1,k,k], got {tuple(weight.shape)}"
        )
    k = kh
    Ho, Wo = H - k + 1, W - k + 1
    w3 = weight.data[:, 0]  # [C, k, k]
    # shift-and-add: k*k contiguous-slice AXPYs beat a strided einsum here
    out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += w3[:, i, j][None, :, None, None] * x.data[:, :, i : i + Ho, j : j + Wo]
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gw = np.empty_like(weight.data)
        gx = np.zeros_like(x.data)
        for i in range(k):
            for j in range(k):
                patch = x.data[:, :, i : i + Ho, j : j + Wo]
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", patch, g, optimize=True)
                gx[:, :, i : i + Ho, j : j + Wo] += (
                    w3[:, i, j][None, :, None, None] * g
                )
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record("depthwise_conv2d", inputs, out, bwd)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel convolution, reflect padding, stride 1."""
    k = weight.shape[2]
    p = k // 2
    xp = pad2d(x, (p, p, p, p), mode="reflect") if p else x
    return depthwise_conv2d_valid(xp, weight, bias)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def layer_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, axis: int = -1
) -> Tensor:
    """Normalize to zero mean / unit variance along one axis, then affine."""
    if eps <= 0:
        raise ContractViolation("layer_norm eps must be > 0")
    ax = axis % x.ndim
    C = x.shape[ax]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ContractViolation(f"gamma/beta must have shape ({C},)")
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[ax] = C
    gview = gamma.data.reshape(bshape)
    out = xhat * gview + beta.data.reshape(bshape)

    def bwd(g):
        ggamma = (g * xhat).sum(axis=tuple(i for i in range(x.ndim) if i != ax))
        gbeta = g.sum(axis=tuple(i for i in range(x.ndim) if i != ax))
        gxhat = g * gview
        m1 = gxhat.mean(axis=ax, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=ax, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return record("layer_norm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# FFT (real tensors in, real/imag pair out)
# ---------------------------------------------------------------------------


def fft2(x: Tensor):
    """Unnormalized 2D DFT over the last two axes; returns (real, imag)."""
    X = np.fft.fft2(x.data, axes=(-2, -1))
    n = x.shape[-2] * x.shape[-1]

    def bwd(gr, gi):
        G = gr + 1j * gi
        return (np.ascontiguousarray(np.real(np.fft.ifft2(G, axes=(-2, -1))) * n),)

    re = np.ascontiguousarray(X.real.astype(x.dtype))
    im = np.ascontiguousarray(X.imag.astype(x.dtype))
    return record("fft2", (x,), (re, im), bwd, n_outputs=2)


def ifft2_real(re: Tensor, im: Tensor) -> Tensor:
    """Real part of the normalized (1/HW) inverse 2D DFT."""
    y = np.real(np.fft.ifft2(re.data + 1j * im.data, axes=(-2, -1)))
    n = re.shape[-2] * re.shape[-1]

    def bwd(g):
        G = np.fft.fft2(g, axes=(-2, -1))
        gr = np.ascontiguousarray(G.real.astype(re.dtype) / n)
        gi = np.ascontiguousarray(G.imag.astype(re.dtype) / n)
        return gr, gi

    return record("ifft2_real", (re, im), np.ascontiguousarray(y.astype(re.dtype)), bwd)


def complex_abs(re: Tensor, im: Tensor) -> Tensor:
    """|re + i*im| with a guarded backward at the origin."""
    out = np.hypot(re.data, im.data)

    def bwd(g):
        denom = np.where(out == 0, 1.0, out)
        return g * re.data / denom, g * im.data / denom

    return record("complex_abs", (re, im), out, bwd)


def complex_angle(re: Tensor, im: Tensor) -> Tensor:
    """atan2(im, re) with a guarded backward at the origin.

    Imaginary parts below round-off scale (relative to the per-image spectral
    peak over the last two axes) are flushed to +0. Real-input DFT bins that
    are exactly real in exact arithmetic carry ~eps garbage there whose sign
    flips under perturbation, which would toggle the angle between +pi and
    -pi; flushing restores the exact value and keeps the angle stable.
    """
    eps = np.finfo(re.dtype).eps
    ax = (-2, -1) if re.ndim >= 2 else None
    peak = np.max(np.abs(re.data) + np.abs(im.data), axis=ax, keepdims=True)
    im_eff = np.where(np.abs(im.data) <= 256.0 * eps * peak, 0.0, im.data)
    im_eff = im_eff.astype(re.dtype)
    out = np.arctan2(im_eff, re.data)
    d2 = re.data * re.data + im_eff * im_eff

    def bwd(g):
        denom = np.where(d2 == 0, 1.0, d2)
        return -g * im_eff / denom, g * re.data / denom

    return record("complex_angle", (re, im), out, bwd)


# ---------------------------------------------------------------------------
# pixel shuffle
# ---------------------------------------------------------------------------


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """[B, C*r*r, H, W] -> [B, C, H*r, W*r] (lossless rearrangement)."""
    B, Crr, H, W = x.shape
    if Crr % (r * r):
        raise ContractViolation(f"channels {Crr} not divisible by r^2={r * r}")
    C = Crr // (r * r)
    t = reshape(x, (B, C, r, r, H, W))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (B, C, H * r, W * r))
