"""Restoration blocks: hierarchical state-space mixing (global four-direction
scans + windowed bidirectional scans + local convolutions), gradient-guided
attention, and frequency-domain (amplitude/phase) processing, composed into
a shape-preserving multi-scale block."""

from __future__ import annotations

import numpy as np

from . import layouts, ops
from .modules import (
    Conv2d,
    DepthwiseConv2d,
    LayerNorm,
    LayerScale,
    Linear,
    Module,
    Parameter,
)
from .ssm import ssm_apply
from .tensor import ContractViolation, Tensor


class SSMHead(Module):
    """One selective-SSM parameter set applied to stacked sequences [G, L, D].

    Step sizes, input projections B_t and readouts C_t are linear functions
    of the sequence itself (the selection mechanism); decay rates come from
    A = -exp(A_log) with timescales spread over 1..N per state index.
    """

    def __init__(self, d_inner: int, n_state: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.A_log = Parameter(
            np.tile(np.log(np.arange(1, n_state + 1, dtype=dtype)), (d_inner, 1))
        )
        self.D_skip = Parameter(np.ones(d_inner, dtype=dtype))
        self.delta_proj = Linear(d_inner, d_inner, rng=rng, dtype=dtype)
        self.b_proj = Linear(d_inner, n_state, bias=False, rng=rng, dtype=dtype)
        self.c_proj = Linear(d_inner, n_state, bias=False, rng=rng, dtype=dtype)
        # bias the softplus pre-activation so initial step sizes land in
        # [0.001, 0.1]: keeps the discrete decay factors away from 0 and 1
        target = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d_inner))
        self.delta_proj.bias.data[:] = np.log(np.expm1(target)).astype(dtype)

    def forward(self, seq: Tensor) -> Tensor:
        delta_pre = self.delta_proj(seq)
        b_seq = self.b_proj(seq)
        c_seq = self.c_proj(seq)
        return ssm_apply(seq, delta_pre, self.A_log, b_seq, c_seq, self.D_skip)


class GSSM(Module):
    """Global branch: four-direction full-map scans with a shared SSM head,
    merged by inverse permutation + sum, then a gated output projection."""

    def __init__(self, channels: int, n_state: int = 16, expand: int = 1,
                 rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        d_inner = channels * expand
        self.norm = LayerNorm(channels, axis=1, dtype=dtype)
        self.in_proj = Linear(channels, d_inner, rng=rng, dtype=dtype)
        self.gate_proj = Linear(channels, d_inner, rng=rng, dtype=dtype)
        self.ssm = SSMHead(d_inner, n_state, rng, dtype=dtype)
        self.out_proj = Linear(d_inner, channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        xn = self.norm(x)
        seq = ops.transpose(ops.reshape(xn, (B, C, H * W)), (0, 2, 1))  # [B, HW, C]
        u = self.in_proj(seq)
        z = self.gate_proj(seq)
        d_inner = u.shape[-1]
        u_map = ops.reshape(ops.transpose(u, (0, 2, 1)), (B, d_inner, H, W))
        dirs = layouts.four_direction_flatten(u_map)
        stack = ops.concat(dirs, axis=0)  # [4B, HW, D]
        y = self.ssm(stack)
        parts = [ops.slice_(y, slice(i * B, (i + 1) * B)) for i in range(4)]
        y_map = layouts.four_direction_merge(parts, H, W)
        y_seq = ops.transpose(ops.reshape(y_map, (B, d_inner, H * W)), (0, 2, 1))
        gated = ops.mul(y_seq, ops.sigmoid(z))
        out = self.out_proj(gated)
        return ops.reshape(ops.transpose(out, (0, 2, 1)), (B, C, H, W))


class RSSM(Module):
    """Regional branch: non-overlapping windows scanned forward and backward
    with a shared SSM head; outputs inverse-permuted, summed, projected."""

    def __init__(self, channels: int, window: int, n_state: int = 16, expand: int = 1,
                 rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        d_inner = channels * expand
        self.window = window
        self.norm = LayerNorm(channels, axis=1, dtype=dtype)
        self.in_proj = Linear(channels, d_inner, rng=rng, dtype=dtype)
        self.ssm = SSMHead(d_inner, n_state, rng, dtype=dtype)
        self.out_proj = Linear(d_inner, channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        xn = self.norm(x)
        wins, grid = layouts.window_partition(xn, self.window)  # [Bw, C, w, w]
        fwd, bwd = layouts.bidir_window_sequences(wins)  # [Bw, w*w, C]
        nw = fwd.shape[0]
        stack = ops.concat([fwd, bwd], axis=0)
        u = self.in_proj(stack)
        y = self.ssm(u)
        y_fwd = ops.slice_(y, slice(0, nw))
        y_bwd = ops.slice_(y, slice(nw, 2 * nw))
        merged = layouts.bidir_window_merge(y_fwd, y_bwd, self.window)  # [Bw, D, w, w]
        d_inner = merged.shape[1]
        mseq = ops.transpose(
            ops.reshape(merged, (nw, d_inner, self.window * self.window)), (0, 2, 1)
        )
        out = self.out_proj(mseq)
        out_w = ops.reshape(
            ops.transpose(out, (0, 2, 1)), (nw, C, self.window, self.window)
        )
        return layouts.window_merge(out_w, grid, H, W)


class LocalBranch(Module):
    """3x3 conv -> ReLU -> 3x3 conv; receptive field 5x5."""

    def __init__(self, channels: int, rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(x)))


class HMB(Module):
    """Sum of the global-scan, regional-scan and local-conv branches, wrapped
    with an identity residual. Branches toggle independently for ablations;
    at least one must stay enabled."""

    def __init__(self, channels: int, window: int, n_state: int = 16, expand: int = 1,
                 use_global: bool = True, use_regional: bool = True,
                 use_local: bool = True, rng: np.random.Generator = None,
                 dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        if not (use_global or use_regional or use_local):
            raise ContractViolation("all branches disabled; enable at least one")
        self.use_global = use_global
        self.use_regional = use_regional
        self.use_local = use_local
        if use_global:
            self.gssm = GSSM(channels, n_state, expand, rng=rng, dtype=dtype)
        if use_regional:
            self.rssm = RSSM(channels, window, n_state, expand, rng=rng, dtype=dtype)
        if use_local:
            self.local = LocalBranch(channels, rng=rng, dtype=dtype)

    def branches(self, x: Tensor) -> Tensor:
        total = None
        if self.use_global:
            total = self.gssm(x)
        if self.use_regional:
            r = self.rssm(x)
            total = r if total is None else ops.add(total, r)
        if self.use_local:
            l = self.local(x)
            total = l if total is None else ops.add(total, l)
        return total

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.branches(x))


def gradient_map(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient magnitude per channel, reflect borders:
    sqrt(Fx^2 + Fy^2 + eps^2). Constant inputs give exactly eps."""
    B, C, H, W = x.shape
    if H < 3 or W < 3:
        raise ContractViolation(f"gradient_map needs H,W >= 3, got {H}x{W}")
    xp = ops.pad2d(x, (1, 1, 1, 1), mode="reflect")
    sl = slice(1, -1)
    fx = ops.sub(
        ops.slice_(xp, (slice(None), slice(None), sl, slice(2, None))),
        ops.slice_(xp, (slice(None), slice(None), sl, slice(0, -2))),
    )
    fy = ops.sub(
        ops.slice_(xp, (slice(None), slice(None), slice(2, None), sl)),
        ops.slice_(xp, (slice(None), slice(None), slice(0, -2), sl)),
    )
    e2 = np.asarray(eps * eps, dtype=x.dtype)
    return ops.sqrt(ops.add(ops.add(ops.mul(fx, fx), ops.mul(fy, fy)), e2))


class ChannelAttention(Module):
    """Global average pool -> 1x1 conv -> ReLU -> 1x1 conv -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 4,
                 rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        mid = max(channels // reduction, 1)
        self.fc1 = Conv2d(channels, mid, 1, rng=rng, dtype=dtype)
        self.fc2 = Conv2d(mid, channels, 1, rng=rng, dtype=dtype)

    def forward(self, t: Tensor) -> Tensor:
        pooled = ops.mean(t, axis=(2, 3), keepdims=True)
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(pooled))))


class SpatialAttention(Module):
    """[channel-mean || channel-max] -> 7x7 conv -> sigmoid."""

    def __init__(self, rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.conv = Conv2d(2, 1, 7, rng=rng, dtype=dtype)

    def forward(self, t: Tensor) -> Tensor:
        m = ops.mean(t, axis=1, keepdims=True)
        mx = ops.max_along(t, axis=1, keepdims=True)
        return ops.sigmoid(self.conv(ops.concat([m, mx], axis=1)))


class AGB(Module):
    """Gradient-guided attention: the input's edge-magnitude map drives
    channel and spatial attention over the input, plus a depthwise residual."""

    def __init__(self, channels: int, rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.trunk = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.ca = ChannelAttention(channels, rng=rng, dtype=dtype)
        self.sa = SpatialAttention(rng=rng, dtype=dtype)
        self.dw = DepthwiseConv2d(channels, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        g = gradient_map(x)
        t = ops.relu(self.trunk(g))
        a_c = self.ca(t)  # [B,C,1,1]
        a_s = self.sa(t)  # [B,1,H,W]
        attended = ops.mul(a_s, ops.mul(a_c, x))
        return ops.add(attended, self.dw(x))


class RFB(Module):
    """Frequency branch: separate 1x1-conv stacks refine the amplitude and
    phase spectra; the recombined real part passes a 3x3 conv and joins a
    depthwise residual of the input."""

    def __init__(self, channels: int, rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.amp1 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.amp2 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.pha1 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.pha2 = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.out_conv = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.dw = DepthwiseConv2d(channels, 3, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        re, im = ops.fft2(x)
        amp = ops.complex_abs(re, im)
        pha = ops.complex_angle(re, im)
        amp2 = self.amp2(ops.relu(self.amp1(amp)))
        pha2 = self.pha2(ops.relu(self.pha1(pha)))
        re2 = ops.mul(amp2, ops.cos(pha2))
        im2 = ops.mul(amp2, ops.sin(pha2))
        y = ops.ifft2_real(re2, im2)
        return ops.add(self.out_conv(y), self.dw(x))


class MultiScaleBlock(Module):
    """HMB -> AGB -> RFB, each as a pre-normalized residual stage with a
    per-channel branch scale. ``zero_init`` starts every stage as a no-op so
    a fresh stack is the identity map."""

    def __init__(self, channels: int, window: int, n_state: int = 16, expand: int = 1,
                 use_global: bool = True, use_regional: bool = True,
                 use_local: bool = True, use_agb: bool = True, use_rfb: bool = True,
                 zero_init: bool = False, rng: np.random.Generator = None,
                 dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        scale0 = 0.0 if zero_init else 1.0
        self.use_agb = use_agb
        self.use_rfb = use_rfb
        self.norm_hmb = LayerNorm(channels, axis=1, dtype=dtype)
        self.hmb = HMB(channels, window, n_state, expand, use_global, use_regional,
                       use_local, rng=rng, dtype=dtype)
        self.scale_hmb = LayerScale(channels, scale0, dtype=dtype)
        if use_agb:
            self.norm_agb = LayerNorm(channels, axis=1, dtype=dtype)
            self.agb = AGB(channels, rng=rng, dtype=dtype)
            self.scale_agb = LayerScale(channels, scale0, dtype=dtype)
        if use_rfb:
            self.norm_rfb = LayerNorm(channels, axis=1, dtype=dtype)
            self.rfb = RFB(channels, rng=rng, dtype=dtype)
            self.scale_rfb = LayerScale(channels, scale0, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.scale_hmb(self.hmb.branches(self.norm_hmb(x))))
        if self.use_agb:
            x = ops.add(x, self.scale_agb(self.agb(self.norm_agb(x))))
        if self.use_rfb:
            x = ops.add(x, self.scale_rfb(self.rfb(self.norm_rfb(x))))
        return x
