"""Composite restoration loss: pixel, edge and frequency terms.

The pixel term is plain mean absolute error. The edge term compares
Laplacian responses through a Charbonnier distance, so constant offsets
cost nothing and structure mismatches dominate. The frequency term is an
L1 distance between full 2-D spectra, normalized by the transform size so
its magnitude is comparable across image sizes.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .config import LossWeights
from .tensor import ContractViolation, Tensor

LAPLACIAN_3X3 = np.array(
    [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]
)

CHARBONNIER_EPS = 1e-3


def _check_pair(pred: Tensor, target: Tensor, name: str) -> None:
    if pred.shape != target.shape:
        raise ContractViolation(
            f"{name}: shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}"
        )


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference."""
    _check_pair(pred, target, "l1_loss")
    return ops.mean(ops.abs_(ops.sub(pred, target)))


def _laplacian(x: Tensor) -> Tensor:
    # fixed per-channel stencil; reflect padding keeps the size
    c = x.shape[1]
    kern = np.broadcast_to(LAPLACIAN_3X3, (c, 1, 3, 3))
    w = Tensor(np.ascontiguousarray(kern), dtype=x.dtype)
    return ops.depthwise_conv2d(x, w)


def edge_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Charbonnier distance between Laplacian responses.

    Returns the Charbonnier floor (1e-3) for identical inputs and for any
    pair differing only by a constant, since the Laplacian kills constants.
    """
    _check_pair(pred, target, "edge_loss")
    d = ops.sub(_laplacian(pred), _laplacian(target))
    eps_sq = np.asarray(CHARBONNIER_EPS, dtype=pred.dtype) ** 2
    return ops.mean(ops.sqrt(ops.add(ops.mul(d, d), float(eps_sq))))


def fft_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute spectral difference (real + imaginary), scaled by 1/(H*W).

    For a single-pixel difference at the origin this equals the spatial L1
    of a single-channel image exactly, since the delta's spectrum is flat.
    """
    _check_pair(pred, target, "fft_loss")
    h, w = pred.shape[-2], pred.shape[-1]
    re_p, im_p = ops.fft2(pred)
    re_t, im_t = ops.fft2(target)
    term = ops.add(
        ops.mean(ops.abs_(ops.sub(re_p, re_t))),
        ops.mean(ops.abs_(ops.sub(im_p, im_t))),
    )
    return ops.mul(term, 1.0 / float(h * w))


def total_loss(pred: Tensor, target: Tensor, weights: LossWeights | None = None):
    """Weighted sum of the three terms.

    Returns ``(total, (l1, edge, fft))`` with the components still on the
    tape, so callers can log them without recomputation.
    """
    w = weights if weights is not None else LossWeights()
    c_l1 = l1_loss(pred, target)
    c_edge = edge_loss(pred, target)
    c_fft = fft_loss(pred, target)
    total = ops.add(
        ops.add(ops.mul(c_l1, w.lambda1), ops.mul(c_edge, w.lambda2)),
        ops.mul(c_fft, w.lambda3),
    )
    return total, (c_l1, c_edge, c_fft)


def combine(weights: LossWeights, l1: float, edge: float, fft: float) -> float:
    """Scalar combination rule shared with ``total_loss`` (for audits)."""
    return weights.lambda1 * l1 + weights.lambda2 * edge + weights.lambda3 * fft
