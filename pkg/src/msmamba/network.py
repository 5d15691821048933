"""The 4-level encoder-decoder restoration network.

Shallow 3x3 conv -> encoder levels (channels double, spatial halves) ->
bottleneck -> decoder levels with skip concatenation + 1x1 fusion ->
output 3x3 conv, optionally plus the input image. Arbitrary H,W >= 8 are
handled by reflect-padding to a multiple of 2^(levels-1) and cropping back.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .blocks import MultiScaleBlock
from .config import NetworkConfig
from .modules import Conv2d, Module, ModuleList
from .tensor import ContractViolation, Tensor


class Downsample(Module):
    """Strided 3x3 conv: [B,C,H,W] -> [B,2C,H/2,W/2] (even H,W required)."""

    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, 2 * channels, 3, stride=2, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ContractViolation(
                f"downsample needs even spatial dims, got {x.shape[2]}x{x.shape[3]}"
            )
        return self.conv(x)


class Upsample(Module):
    """1x1 conv to 2C channels, then pixel-shuffle: [B,C,H,W] -> [B,C/2,2H,2W]."""

    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, 2 * channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.conv(x), 2)


def _make_blocks(n: int, channels: int, window: int, cfg: NetworkConfig, rng) -> ModuleList:
    return ModuleList(
        MultiScaleBlock(
            channels, window, n_state=cfg.n_state, expand=cfg.expand,
            use_global=cfg.use_global, use_regional=cfg.use_regional,
            use_local=cfg.use_local, use_agb=cfg.use_agb, use_rfb=cfg.use_rfb,
            zero_init=cfg.zero_block_init, rng=rng, dtype=cfg.np_dtype,
        )
        for _ in range(n)
    )


class MSMambaNet(Module):
    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dt = cfg.np_dtype
        C = cfg.base_channels
        L = cfg.levels
        self.shallow = Conv2d(3, C, 3, rng=rng, dtype=dt)

        self.enc_blocks = ModuleList()
        self.downs = ModuleList()
        for lv in range(L - 1):
            ch = C * (2**lv)
            self.enc_blocks.append(
                _make_blocks(cfg.blocks_per_level[lv], ch, cfg.windows[lv], cfg, rng)
            )
            self.downs.append(Downsample(ch, rng, dt))

        bott_ch = C * (2 ** (L - 1))
        self.bottleneck = _make_blocks(
            cfg.blocks_per_level[L - 1], bott_ch, cfg.windows[L - 1], cfg, rng
        )

        self.ups = ModuleList()
        self.fuse = ModuleList()
        self.dec_blocks = ModuleList()
        for lv in range(L - 2, -1, -1):
            ch = C * (2**lv)
            self.ups.append(Upsample(2 * ch, rng, dt))
            self.fuse.append(Conv2d(2 * ch, ch, 1, rng=rng, dtype=dt))
            self.dec_blocks.append(
                _make_blocks(cfg.blocks_per_level[lv], ch, cfg.windows[lv], cfg, rng)
            )

        self.out_conv = Conv2d(C, 3, 3, rng=rng, dtype=dt)

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ContractViolation(f"expected [N,3,H,W] input, got {image.shape}")
        B, _, H, W = image.shape
        if H < 8 or W < 8:
            raise ContractViolation(f"input spatial size must be >= 8, got {H}x{W}")
        m = 2 ** (self.cfg.levels - 1)
        ph = (-H) % m
        pw = (-W) % m
        x = ops.pad2d(image, (0, ph, 0, pw), mode="reflect") if (ph or pw) else image

        feat = self.shallow(x)
        skips = []
        for blocks_lv, down in zip(self.enc_blocks, self.downs):
            for blk in blocks_lv:
                feat = blk(feat)
            skips.append(feat)
            feat = down(feat)
        for blk in self.bottleneck:
            feat = blk(feat)
        for up, fuse, blocks_lv, skip in zip(
            self.ups, self.fuse, self.dec_blocks, reversed(skips)
        ):
            feat = up(feat)
            feat = fuse(ops.concat([feat, skip], axis=1))
            for blk in blocks_lv:
                feat = blk(feat)
        out = self.out_conv(feat)
        if self.cfg.global_residual:
            out = ops.add(out, x)
        if ph or pw:
            out = ops.slice_(out, (slice(None), slice(None), slice(0, H), slice(0, W)))
        return out


def build_network(cfg: NetworkConfig, seed: int) -> MSMambaNet:
    """Deterministic construction: same (cfg, seed) gives bitwise-identical
    parameters."""
    return MSMambaNet(cfg, np.random.default_rng(seed))
