"""Evaluation metrics: PSNR, SSIM and the Y-channel protocol.

These operate on plain numpy arrays (no tape involvement) since they are
verification-side code. Images are ``[3,H,W]`` or ``[1,H,W]`` floats in
``[0,1]``; single-channel helpers also accept bare ``[H,W]`` arrays.

Luma uses the BT.601 studio-swing transform, the convention the common
restoration evaluation scripts follow: black maps to 16/255, white to
235/255. SSIM uses the original 11x11 Gaussian window (sigma 1.5) with
K1=0.01, K2=0.03, dynamic range 1, computed over valid windows only.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ContractViolation

_Y_COEFFS = np.array([65.481, 128.553, 24.966]) / 255.0
_Y_OFFSET = 16.0 / 255.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(img) -> np.ndarray:
    arr = np.asarray(getattr(img, "data", img), dtype=np.float64)
    return arr


def rgb_to_y(img) -> np.ndarray:
    """BT.601 studio-swing luma of a ``[3,H,W]`` image in [0,1] -> ``[1,H,W]``."""
    arr = _as_array(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractViolation(f"rgb_to_y expects [3,H,W], got {arr.shape}")
    y = np.tensordot(_Y_COEFFS, arr, axes=([0], [0])) + _Y_OFFSET
    return y[None]


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give +inf."""
    x = _as_array(a)
    y = _as_array(b)
    if x.shape != y.shape:
        raise ContractViolation(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_single(x: np.ndarray, y: np.ndarray) -> float:
    win = SSIM_WINDOW
    if x.shape[0] < win or x.shape[1] < win:
        raise ContractViolation(
            f"ssim needs at least {win}x{win} pixels, got {x.shape}"
        )
    w = _gaussian_window(win, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    def filt(img):
        view = sliding_window_view(img, (win, win))
        return np.tensordot(view, w, axes=([2, 3], [0, 1]))

    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean local SSIM of two single-channel images in [0,1]."""
    x = _as_array(a)
    y = _as_array(b)
    if x.shape != y.shape:
        raise ContractViolation(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ContractViolation(
                f"ssim expects single-channel input, got {x.shape}; "
                "use evaluate_pair for RGB"
            )
        x, y = x[0], y[0]
    elif x.ndim != 2:
        raise ContractViolation(f"ssim expects [H,W] or [1,H,W], got {x.shape}")
    return _ssim_single(x, y)


def evaluate_pair(pred, gt, channel: str = "y") -> tuple:
    """(PSNR, SSIM) of a ``[3,H,W]`` pair under the named protocol.

    ``channel="y"``: both metrics on the luma plane (derain/denoise style).
    ``channel="rgb"``: PSNR over all three channels, SSIM averaged across
    channels (dehaze/low-light style).
    """
    p = _as_array(pred)
    g = _as_array(gt)
    if p.shape != g.shape or p.ndim != 3 or p.shape[0] != 3:
        raise ContractViolation(
            f"evaluate_pair expects matching [3,H,W] images, got {p.shape} vs {g.shape}"
        )
    if channel == "y":
        py, gy = rgb_to_y(p), rgb_to_y(g)
        return psnr(py, gy), ssim(py, gy)
    if channel == "rgb":
        val = psnr(p, g)
        s = float(np.mean([_ssim_single(p[c], g[c]) for c in range(3)]))
        return val, s
    raise ContractViolation(f"channel must be 'y' or 'rgb', got {channel!r}")
