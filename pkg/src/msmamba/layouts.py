"""Layout transforms between 2D feature maps and 1D scan sequences.

Every transform here is an exact bijection built from reshape/transpose/flip
tape ops, so round-trips are bitwise identities and gradients flow through
for free. Directions: row-major, reversed row-major, column-major, reversed
column-major; windows flatten row-major with an optional reversal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from . import ops
from .tensor import ContractViolation, Tensor

DIRECTIONS = ("row_fwd", "row_bwd", "col_fwd", "col_bwd")


@dataclass(frozen=True)
class WindowGrid:
    """Tiling of a (reflect-padded) H×W map into non-overlapping windows."""

    window: int
    padded_h: int
    padded_w: int

    @property
    def n_h(self) -> int:
        return self.padded_h // self.window

    @property
    def n_w(self) -> int:
        return self.padded_w // self.window

    @property
    def n_windows(self) -> int:
        return self.n_h * self.n_w


def _row_major(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return ops.transpose(ops.reshape(x, (B, C, H * W)), (0, 2, 1))  # [B, HW, C]


def _row_major_inv(s: Tensor, H: int, W: int) -> Tensor:
    B, L, C = s.shape
    return ops.reshape(ops.transpose(s, (0, 2, 1)), (B, C, H, W))


def four_direction_flatten(x: Tensor) -> List[Tensor]:
    """[B,C,H,W] -> four [B, H*W, C] sequences: row-major, its reverse,
    column-major, its reverse."""
    B, C, H, W = x.shape
    rm = _row_major(x)
    cm = _row_major(ops.transpose(x, (0, 1, 3, 2)))
    return [rm, ops.flip(rm, 1), cm, ops.flip(cm, 1)]


def four_direction_merge(seqs: Sequence[Tensor], H: int, W: int) -> Tensor:
    """Map each sequence back to map layout and sum the four contributions."""
    if len(seqs) != 4:
        raise ContractViolation(f"expected 4 sequences, got {len(seqs)}")
    for i, s in enumerate(seqs):
        if s.shape[1] != H * W:
            raise ContractViolation(
                f"sequence {i} length {s.shape[1]} != H*W = {H * W}"
            )
    rm = _row_major_inv(seqs[0], H, W)
    rm_rev = _row_major_inv(ops.flip(seqs[1], 1), H, W)
    cm = ops.transpose(_row_major_inv(seqs[2], W, H), (0, 1, 3, 2))
    cm_rev = ops.transpose(_row_major_inv(ops.flip(seqs[3], 1), W, H), (0, 1, 3, 2))
    return ops.add(ops.add(rm, rm_rev), ops.add(cm, cm_rev))


def window_partition(x: Tensor, window: int) -> Tuple[Tensor, WindowGrid]:
    """Reflect-pad H,W up to multiples of ``window`` and tile.

    [B,C,H,W] -> ([B*nW, C, window, window], grid); windows are ordered
    row-major over the tile grid, batch-major overall.
    """
    if window < 1:
        raise ContractViolation(f"window must be >= 1, got {window}")
    B, C, H, W = x.shape
    ph = (-H) % window
    pw = (-W) % window
    grid = WindowGrid(window=window, padded_h=H + ph, padded_w=W + pw)
    xp = ops.pad2d(x, (0, ph, 0, pw), mode="reflect") if (ph or pw) else x
    nh, nw = grid.n_h, grid.n_w
    t = ops.reshape(xp, (B, C, nh, window, nw, window))
    t = ops.transpose(t, (0, 2, 4, 1, 3, 5))  # [B, nh, nw, C, w, w]
    return ops.reshape(t, (B * nh * nw, C, window, window)), grid


def window_merge(windows: Tensor, grid: WindowGrid, H: int, W: int) -> Tensor:
    """Inverse tiling of window_partition, cropping the padding."""
    BW, C, wh, ww = windows.shape
    if wh != grid.window or ww != grid.window or BW % grid.n_windows:
        raise ContractViolation(
            f"window tensor {tuple(windows.shape)} inconsistent with grid {grid}"
        )
    B = BW // grid.n_windows
    nh, nw, w = grid.n_h, grid.n_w, grid.window
    t = ops.reshape(windows, (B, nh, nw, C, w, w))
    t = ops.transpose(t, (0, 3, 1, 4, 2, 5))  # [B, C, nh, w, nw, w]
    t = ops.reshape(t, (B, C, grid.padded_h, grid.padded_w))
    if grid.padded_h != H or grid.padded_w != W:
        t = ops.slice_(t, (slice(None), slice(None), slice(0, H), slice(0, W)))
    return t


def bidir_window_sequences(windows: Tensor) -> Tuple[Tensor, Tensor]:
    """[Bw,C,w,w] -> forward (row-major within window) and reversed [Bw, w*w, C]."""
    fwd = _row_major(windows)
    return fwd, ops.flip(fwd, 1)


def bidir_window_merge(y_fwd: Tensor, y_bwd: Tensor, window: int) -> Tensor:
    """Inverse-permute both scan outputs back to window layout and sum."""
    if y_fwd.shape != y_bwd.shape:
        raise ContractViolation("forward/backward sequence shapes differ")
    if y_fwd.shape[1] != window * window:
        raise ContractViolation(
            f"sequence length {y_fwd.shape[1]} != window^2 = {window * window}"
        )
    a = _row_major_inv(y_fwd, window, window)
    b = _row_major_inv(ops.flip(y_bwd, 1), window, window)
    return ops.add(a, b)
