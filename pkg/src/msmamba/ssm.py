"""Selective state-space recurrence: parameters, discretization, scans.

The continuous system h' = A h + B x, y = C h + D x is discretized per step
with zero-order hold on A (abar = exp(dt*A)) and the simplified Euler form
for the input term (bbarx = dt * B_t * x_t). Step size dt and the per-step
B_t, C_t are projections of the input, which is what makes the scan
"selective". A is diagonal: one negative scalar per (channel, state).

Two evaluation paths exist on purpose:
  * `selective_scan_seq` — a plain numpy reference recurrence, kept simple
    enough to audit by eye; the correctness oracle.
  * `selective_scan_chunked` — the compiled chunk-parallel kernel.
`ssm_apply` is the tape-integrated fused op the network trains through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import ContractViolation, Tensor, record


@dataclass
class SSMParams:
    """Learnable parameters of one selective-SSM head (plain arrays).

    A_log: [D, N] with A = -exp(A_log); W_B, W_C: [N, D] input-to-state and
    state-to-output projections; W_dt: [D, D] + b_dt: [D] step-size
    projection (softplus-activated); D_skip: [D] direct feedthrough.
    """

    A_log: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray
    W_dt: np.ndarray
    b_dt: np.ndarray
    D_skip: np.ndarray

    @classmethod
    def init(cls, d_inner: int, n_state: int, rng: np.random.Generator, dtype=np.float64):
        """Decay timescales log(1..N) per state; dt bias placing softplus output
        in [0.001, 0.1] at start; small random projections."""
        A_log = np.tile(np.log(np.arange(1, n_state + 1, dtype=dtype)), (d_inner, 1))
        W_B = (rng.standard_normal((n_state, d_inner)) * (d_inner**-0.5)).astype(dtype)
        W_C = (rng.standard_normal((n_state, d_inner)) * (d_inner**-0.5)).astype(dtype)
        W_dt = (rng.standard_normal((d_inner, d_inner)) * (d_inner**-0.5) * 0.1).astype(dtype)
        # softplus(b) spread log-uniformly over [0.001, 0.1]
        target = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d_inner))
        b_dt = np.log(np.expm1(target)).astype(dtype)
        D_skip = np.ones(d_inner, dtype=dtype)
        return cls(A_log, W_B, W_C, W_dt, b_dt, D_skip)

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.A_log.shape[1]

    def delta(self, x_seq: np.ndarray) -> np.ndarray:
        pre = x_seq @ self.W_dt.T + self.b_dt
        return np.logaddexp(np.zeros((), dtype=pre.dtype), pre)

    def B_of(self, x_seq: np.ndarray) -> np.ndarray:
        return x_seq @ self.W_B.T

    def C_of(self, x_seq: np.ndarray) -> np.ndarray:
        return x_seq @ self.W_C.T


@dataclass
class DiscreteSSM:
    """Per-step discrete operators: abar, bbar_x both [L, D, N], 0 < abar < 1."""

    abar: np.ndarray
    bbar_x: np.ndarray


def zoh_discretize(params: SSMParams, x_seq: np.ndarray) -> DiscreteSSM:
    """Discretize for one sequence x_seq [L, D]: abar = exp(dt*A), bbarx = dt*B_t*x_t."""
    x_seq = np.asarray(x_seq)
    if x_seq.ndim != 2 or x_seq.shape[1] != params.d_inner:
        raise ContractViolation(
            f"x_seq must be [L, {params.d_inner}], got {tuple(x_seq.shape)}"
        )
    finite = np.isfinite(x_seq).all(axis=1)
    if not finite.all():
        t_bad = int(np.argmin(finite))
        raise ContractViolation(f"non-finite input at sequence index {t_bad}")
    dt = params.delta(x_seq)  # [L, D]
    B = params.B_of(x_seq)  # [L, N]
    abar = np.exp(dt[:, :, None] * params.A[None])
    bbar_x = dt[:, :, None] * B[:, None, :] * x_seq[:, :, None]
    return DiscreteSSM(abar=abar, bbar_x=bbar_x)


def selective_scan_seq(
    d: DiscreteSSM,
    C_seq: np.ndarray,
    D_skip: np.ndarray,
    x_seq: np.ndarray,
    return_hidden: bool = False,
):
    """Reference recurrence h_t = abar_t h_{t-1} + bbarx_t, y_t = <C_t,h_t> + D x_t.

    The state readout accumulates over states in ascending order so the
    compiled paths can match it bitwise.
    """
    L, D, N = d.abar.shape
    h = np.zeros((D, N), dtype=d.abar.dtype)
    y = np.empty((L, D), dtype=d.abar.dtype)
    hs = np.empty((L, D, N), dtype=d.abar.dtype) if return_hidden else None
    for t in range(L):
        h = d.abar[t] * h + d.bbar_x[t]
        if return_hidden:
            hs[t] = h
        acc = np.zeros(D, dtype=d.abar.dtype)
        for n in range(N):
            acc = acc + C_seq[t, n] * h[:, n]
        y[t] = acc + D_skip * x_seq[t]
    if return_hidden:
        return y, hs
    return y


def selective_scan_chunked(
    d: DiscreteSSM,
    C_seq: np.ndarray,
    D_skip: np.ndarray,
    x_seq: np.ndarray,
    chunk: int,
) -> np.ndarray:
    """Chunk-parallel evaluation of the same recurrence (see _kernels)."""
    if chunk < 1:
        raise ContractViolation(f"chunk must be >= 1, got {chunk}")
    y, _h = _kernels.chunked_scan(
        np.ascontiguousarray(d.abar),
        np.ascontiguousarray(d.bbar_x),
        np.ascontiguousarray(C_seq),
        np.ascontiguousarray(D_skip),
        np.ascontiguousarray(x_seq),
        chunk,
    )
    return y


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ssm_apply(
    x_seq: Tensor,
    delta_pre: Tensor,
    A_log: Tensor,
    B_seq: Tensor,
    C_seq: Tensor,
    D_skip: Tensor,
) -> Tensor:
    """Differentiable fused selective scan over G stacked sequences.

    x_seq, delta_pre: [G, L, D]; A_log: [D, N]; B_seq, C_seq: [G, L, N];
    D_skip: [D]. Step sizes are softplus(delta_pre); decay rates -exp(A_log).
    Forward keeps only the discrete decay factors; the backward pass
    recomputes the hidden states from them.
    """
    G, L, D = x_seq.shape
    N = A_log.shape[1]
    if delta_pre.shape != (G, L, D):
        raise ContractViolation(f"delta_pre must be {(G, L, D)}, got {delta_pre.shape}")
    if B_seq.shape != (G, L, N) or C_seq.shape != (G, L, N):
        raise ContractViolation(f"B_seq/C_seq must be {(G, L, N)}")
    if A_log.shape[0] != D or D_skip.shape != (D,):
        raise ContractViolation("A_log/D_skip dimensions inconsistent with x_seq")
    dt = _softplus(delta_pre.data)
    A = -np.exp(A_log.data)
    y, abar = _kernels.ssm_forward(dt, A, B_seq.data, C_seq.data, D_skip.data, x_seq.data)

    def bwd(gy):
        ddt, dA_part, dB, dC, dDsk_part, dx = _kernels.ssm_backward(
            dt, A, B_seq.data, C_seq.data, D_skip.data, x_seq.data, abar,
            np.ascontiguousarray(gy),
        )
        dA = dA_part.sum(axis=0)
        gA_log = dA * A  # dA/dA_log = -exp(A_log) = A
        gdelta = ddt * _sigmoid(delta_pre.data)
        return dx, gdelta, gA_log, dB, dC, dDsk_part.sum(axis=0)

    return record("ssm_apply", (x_seq, delta_pre, A_log, B_seq, C_seq, D_skip), y, bwd)
